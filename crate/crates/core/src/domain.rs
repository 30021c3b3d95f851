//! Problem data: models, agent types, instances and realized outcomes.
//!
//! Rewards are linear: arm `i` of type `x` under model `u` pays `x_i · u` in
//! expectation. Each round realizes a noisy model `r = u + ξ` with i.i.d.
//! Gaussian coordinates of standard deviation `R`; the reward is `x_i · r`.
//! Under semi-bandit feedback the principal also sees `r` on the support of
//! the chosen row.

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::Message;

/// Slack used when comparing norms against caps.
pub const CAP_TOL: f64 = 1e-9;

/// A candidate reward model `u ∈ R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct ModelVector(DVector<f64>);

impl ModelVector {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(DVector::from_vec(coords))
    }

    pub fn from_dvector(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    pub fn distance(&self, other: &ModelVector) -> f64 {
        (&self.0 - &other.0).norm()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self::new(v)
    }
}

impl From<ModelVector> for Vec<f64> {
    fn from(m: ModelVector) -> Self {
        m.0.as_slice().to_vec()
    }
}

impl fmt::Display for ModelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentTypeRepr {
    rows: Vec<Vec<f64>>,
    #[serde(default)]
    public_id: usize,
}

/// An agent type: one feature row `x_i ∈ R^d` per arm, plus the label of
/// its public part `pub(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AgentTypeRepr", into = "AgentTypeRepr")]
pub struct AgentType {
    rows: Vec<DVector<f64>>,
    public_id: usize,
}

impl TryFrom<AgentTypeRepr> for AgentType {
    type Error = Error;

    fn try_from(r: AgentTypeRepr) -> Result<Self> {
        AgentType::new(r.rows, r.public_id)
    }
}

impl From<AgentType> for AgentTypeRepr {
    fn from(x: AgentType) -> Self {
        AgentTypeRepr {
            rows: x.rows.iter().map(|r| r.as_slice().to_vec()).collect(),
            public_id: x.public_id,
        }
    }
}

impl AgentType {
    pub fn new(rows: Vec<Vec<f64>>, public_id: usize) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidInput("agent type needs at least one row".into()));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::InvalidInput("agent type rows must be non-empty".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("agent type has a non-finite entry".into()));
        }
        Ok(Self {
            rows: rows.into_iter().map(DVector::from_vec).collect(),
            public_id,
        })
    }

    /// The K-armed embedding `x = I_K`.
    pub fn identity(k: usize) -> Self {
        let rows = (0..k)
            .map(|i| {
                let mut r = vec![0.0; k];
                r[i] = 1.0;
                r
            })
            .collect();
        Self::new(rows, 0).expect("identity rows are well formed")
    }

    /// Sleeping-bandit type `diag(v)` for a feasibility mask `v`.
    pub fn sleeping(feasible: &[bool]) -> Self {
        let k = feasible.len();
        let rows = (0..k)
            .map(|i| {
                let mut r = vec![0.0; k];
                if feasible[i] {
                    r[i] = 1.0;
                }
                r
            })
            .collect();
        Self::new(rows, 0).expect("sleeping rows are well formed")
    }

    pub fn with_public_id(mut self, public_id: usize) -> Self {
        self.public_id = public_id;
        self
    }

    pub fn arms(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn public_id(&self) -> usize {
        self.public_id
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> Result<&DVector<f64>> {
        self.rows.get(i).ok_or(Error::ArmOutOfRange {
            arm: i,
            arms: self.rows.len(),
        })
    }

    /// All entries are 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.rows.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Square and diagonal with 0/1 entries: row `i` is either `0` or `e_i`.
    pub fn is_sleeping(&self) -> bool {
        self.dim() == self.arms()
            && self.rows.iter().enumerate().all(|(i, r)| {
                r.iter()
                    .enumerate()
                    .all(|(j, &v)| if i == j { v == 0.0 || v == 1.0 } else { v == 0.0 })
            })
    }

    /// Arms whose row is not identically zero.
    pub fn feasible_arms(&self) -> Vec<usize> {
        (0..self.arms())
            .filter(|&i| self.rows[i].iter().any(|&v| v != 0.0))
            .collect()
    }

    /// `argmax_i x_i · u`, ties to the lowest arm.
    pub fn best_arm(&self, u: &DVector<f64>) -> Result<usize> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(argmax(self.rows.iter().map(|r| r.dot(u))))
    }
}

/// Index of the largest value, first one on ties. NaN never wins.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Bandit,
    SemiBandit,
}

/// Problem structure shared by every round of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    /// Model dimension `d`.
    pub d: usize,
    /// Number of arms `K`.
    pub k: usize,
    /// Cap on `‖u‖₂`.
    pub c_u: f64,
    /// Cap on each `‖x_i‖₂`.
    pub c_x: f64,
    /// Cap on the number of nonzeros per row.
    pub sparsity: usize,
    /// Per-coordinate noise standard deviation `R`.
    pub noise: f64,
    /// Horizon `T`.
    pub horizon: usize,
    /// Warm-start length `T0`.
    pub warm_start: usize,
    pub feedback: Feedback,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.d < 1 {
            return bad("d must be at least 1");
        }
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        if self.sparsity < 1 || self.sparsity > self.d {
            return bad("sparsity cap must lie in [1, d]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise scale R must be finite and non-negative");
        }
        if !(self.c_u > 0.0 && self.c_x > 0.0) {
            return bad("norm caps must be positive");
        }
        if self.warm_start > self.horizon {
            return bad("warm-start length exceeds the horizon");
        }
        Ok(())
    }
}

/// `x_i · u`.
pub fn expected_reward(u: &ModelVector, x: &AgentType, i: usize) -> Result<f64> {
    let row = x.row(i)?;
    if row.len() != u.dim() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            got: u.dim(),
        });
    }
    Ok(row.dot(u.coords()))
}

/// Realized reward and auxiliary semi-bandit observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub reward: f64,
    /// `(coordinate, observed r_j)` on the support of the chosen row;
    /// `None` under bandit feedback.
    pub aux: Option<Vec<(usize, f64)>>,
}

/// Draws `r = u + ξ` and returns `x_i · r` (plus `r` on `supp(x_i)` under
/// semi-bandit feedback).
pub fn realize_outcome<R: Rng + ?Sized>(
    u: &ModelVector,
    x: &AgentType,
    i: usize,
    inst: &Instance,
    rng: &mut R,
) -> Result<Outcome> {
    let row = x.row(i)?;
    if row.len() != u.dim() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            got: u.dim(),
        });
    }
    let noisy = u.coords().map(|c| {
        let z: f64 = rng.sample(StandardNormal);
        c + inst.noise * z
    });
    let reward = row.dot(&noisy);
    let aux = match inst.feedback {
        Feedback::Bandit => None,
        Feedback::SemiBandit => Some(
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, _)| (j, noisy[j]))
                .collect(),
        ),
    };
    Ok(Outcome { reward, aux })
}

/// One round of the protocol as seen by the principal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    /// Index of the agent type in the experiment's type catalogue.
    pub type_id: usize,
    pub public_id: usize,
    /// `None` during the warm start.
    pub message: Option<Message>,
    pub arm: usize,
    /// Feature row of the chosen arm, `x_{A_t}`.
    pub feature: DVector<f64>,
    pub reward: f64,
    pub aux: Option<Vec<(usize, f64)>>,
}

impl RoundRecord {
    pub fn new(t: usize, type_id: usize, x: &AgentType, arm: usize, outcome: Outcome) -> Result<Self> {
        Ok(Self {
            t,
            type_id,
            public_id: x.public_id(),
            message: None,
            arm,
            feature: x.row(arm)?.clone(),
            reward: outcome.reward,
            aux: outcome.aux,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmupData {
    pub records: Vec<RoundRecord>,
}

impl WarmupData {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ModelNorm {
        model: usize,
        norm: f64,
        cap: f64,
    },
    ModelDimension {
        model: usize,
        dim: usize,
    },
    ArmCount {
        type_index: usize,
        arms: usize,
    },
    RowDimension {
        type_index: usize,
        row: usize,
        dim: usize,
    },
    RowNorm {
        type_index: usize,
        row: usize,
        norm: f64,
        cap: f64,
    },
    RowSparsity {
        type_index: usize,
        row: usize,
        nonzeros: usize,
        cap: usize,
    },
    NonBinaryRow {
        type_index: usize,
        row: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every cap violated by the given types and sampled models.
pub fn validate_instance(inst: &Instance, types: &[AgentType], models: &[ModelVector]) -> ValidationReport {
    let mut violations = Vec::new();
    for (m, u) in models.iter().enumerate() {
        if u.dim() != inst.d {
            violations.push(Violation::ModelDimension { model: m, dim: u.dim() });
            continue;
        }
        let norm = u.norm();
        if norm > inst.c_u + CAP_TOL {
            violations.push(Violation::ModelNorm {
                model: m,
                norm,
                cap: inst.c_u,
            });
        }
    }
    for (ti, x) in types.iter().enumerate() {
        if x.arms() != inst.k {
            violations.push(Violation::ArmCount {
                type_index: ti,
                arms: x.arms(),
            });
        }
        for (ri, row) in x.rows().iter().enumerate() {
            if row.len() != inst.d {
                violations.push(Violation::RowDimension {
                    type_index: ti,
                    row: ri,
                    dim: row.len(),
                });
                continue;
            }
            let norm = row.norm();
            if norm > inst.c_x + CAP_TOL {
                violations.push(Violation::RowNorm {
                    type_index: ti,
                    row: ri,
                    norm,
                    cap: inst.c_x,
                });
            }
            let nonzeros = row.iter().filter(|&&v| v != 0.0).count();
            if nonzeros > inst.sparsity {
                violations.push(Violation::RowSparsity {
                    type_index: ti,
                    row: ri,
                    nonzeros,
                    cap: inst.sparsity,
                });
            }
            if inst.feedback == Feedback::SemiBandit && row.iter().any(|&v| v != 0.0 && v != 1.0) {
                violations.push(Violation::NonBinaryRow {
                    type_index: ti,
                    row: ri,
                });
            }
        }
    }
    ValidationReport { violations }
}
