//! The principal's messaging policies and the warm-start generators.

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{argmax, realize_outcome, AgentType, Instance, ModelVector, RoundRecord, WarmupData};
use crate::error::{Error, Result};
use crate::priors::PosteriorState;
use crate::rng::{Purpose, Streams};
use crate::semantics::{HypercubeCover, Message, SemanticMap};
use crate::spectral::GramAccumulator;

/// Mutable state of one policy within one replicate.
#[derive(Debug, Clone)]
pub enum PolicyState {
    /// Filtered posterior sampling.
    Fps {
        posterior: PosteriorState,
        smap: SemanticMap,
    },
    /// Filtered least squares over a hypercube tiling.
    Fls {
        gram: GramAccumulator,
        moment: DVector<f64>,
        cover: HypercubeCover,
    },
    /// Per-arm UCB on the K-armed embedding; `rho = 0` is Greedy.
    Ucb {
        rho: f64,
        counts: Vec<usize>,
        means: Vec<f64>,
    },
}

/// What the policy emitted in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub message: Message,
    /// The sampled (FPS) or estimated (FLS) model.
    pub model: Option<ModelVector>,
    /// FLS only: the estimate left the tiled box and was clamped.
    pub clamped: bool,
}

impl PolicyState {
    pub fn fps(posterior: PosteriorState, smap: SemanticMap) -> Self {
        PolicyState::Fps { posterior, smap }
    }

    pub fn fls(dim: usize, cover: HypercubeCover) -> Result<Self> {
        if cover.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: cover.dim(),
            });
        }
        Ok(PolicyState::Fls {
            gram: GramAccumulator::new(dim),
            moment: DVector::zeros(dim),
            cover,
        })
    }

    pub fn ucb(rho: f64, arms: usize) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInput(
                "UCB exploration weight rho must be finite and >= 0".into(),
            ));
        }
        Ok(PolicyState::Ucb {
            rho,
            counts: vec![0; arms],
            means: vec![0.0; arms],
        })
    }

    /// Draws `u_t` from the posterior and filters it through the map.
    pub fn fps_step<R: Rng + ?Sized>(&self, x_pub: usize, rng: &mut R) -> Result<(Message, ModelVector)> {
        let PolicyState::Fps { posterior, smap } = self else {
            return Err(Error::InvalidInput("fps_step on a non-FPS state".into()));
        };
        let u = posterior.sample(rng)?;
        let m = smap.apply(x_pub, &u)?;
        Ok((m, u))
    }

    /// The regularized least-squares estimate `(I + Σ̂)⁻¹ Σ x·y`.
    pub fn fls_estimate(&self) -> Result<ModelVector> {
        let PolicyState::Fls { gram, moment, .. } = self else {
            return Err(Error::InvalidInput("fls_estimate on a non-FLS state".into()));
        };
        let d = gram.dim();
        let a = gram.matrix() + nalgebra::DMatrix::identity(d, d);
        let chol = Cholesky::new(a).ok_or_else(|| Error::Numerical {
            dim: d,
            frobenius: gram.matrix().norm(),
            diag_min: gram.diag_min(),
            diag_max: gram.matrix().diagonal().max(),
            detail: "I + Gram matrix is not positive definite".into(),
        })?;
        Ok(ModelVector::from_dvector(chol.solve(moment)))
    }

    pub fn fls_step(&self, _x_pub: usize) -> Result<Proposal> {
        let PolicyState::Fls { cover, .. } = self else {
            return Err(Error::InvalidInput("fls_step on a non-FLS state".into()));
        };
        let estimate = self.fls_estimate()?;
        let (inside, clamped) = cover.clamp(estimate.as_slice());
        let message = Message::Cell(cover.cell_of(&inside)?);
        Ok(Proposal {
            message,
            model: Some(estimate),
            clamped,
        })
    }

    /// UCB indices after `elapsed = t - 1` rounds. The bonus vanishes when
    /// `log(elapsed) <= 0`.
    pub fn ucb_indices(&self, elapsed: f64) -> Result<Vec<f64>> {
        let PolicyState::Ucb { rho, counts, means } = self else {
            return Err(Error::InvalidInput("ucb_indices on a non-UCB state".into()));
        };
        if let Some(arm) = counts.iter().position(|&n| n == 0) {
            return Err(Error::UninitializedArm(arm));
        }
        let log = if elapsed > 1.0 { elapsed.ln() } else { 0.0 };
        Ok(means
            .iter()
            .zip(counts)
            .map(|(m, &n)| m + (rho * log / n as f64).sqrt())
            .collect())
    }

    pub fn ucb_step(&self, t: usize) -> Result<Message> {
        let idx = self.ucb_indices(t.saturating_sub(1) as f64)?;
        Ok(Message::Arm(argmax(idx)))
    }

    /// One round's proposal, whatever the policy.
    pub fn propose<R: Rng + ?Sized>(&self, t: usize, x_pub: usize, rng: &mut R) -> Result<Proposal> {
        match self {
            PolicyState::Fps { .. } => {
                let (message, u) = self.fps_step(x_pub, rng)?;
                Ok(Proposal {
                    message,
                    model: Some(u),
                    clamped: false,
                })
            }
            PolicyState::Fls { .. } => self.fls_step(x_pub),
            PolicyState::Ucb { .. } => Ok(Proposal {
                message: self.ucb_step(t)?,
                model: None,
                clamped: false,
            }),
        }
    }

    pub fn update(&mut self, rec: &RoundRecord, inst: &Instance) -> Result<()> {
        match self {
            PolicyState::Fps { posterior, .. } => posterior.update(rec, inst),
            PolicyState::Fls { gram, moment, .. } => {
                gram.absorb(&rec.feature)?;
                moment.axpy(rec.reward, &rec.feature, 1.0);
                Ok(())
            }
            PolicyState::Ucb { counts, means, .. } => {
                let arm = rec.arm;
                if arm >= counts.len() {
                    return Err(Error::ArmOutOfRange {
                        arm,
                        arms: counts.len(),
                    });
                }
                counts[arm] += 1;
                means[arm] += (rec.reward - means[arm]) / counts[arm] as f64;
                Ok(())
            }
        }
    }

    pub fn posterior(&self) -> Option<&PosteriorState> {
        match self {
            PolicyState::Fps { posterior, .. } => Some(posterior),
            _ => None,
        }
    }
}

/// How the exogenous warm-start rounds choose arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarmstartPlan {
    /// Exactly one of: each arm `per_arm` times in arm order, or a greedy
    /// schedule until every atom (coordinate) has `per_atom` observations.
    RoundRobin {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_arm: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_atom: Option<usize>,
    },
    /// A uniformly random arm with probability `epsilon`, arm 0 otherwise.
    NearUniform {
        epsilon: f64,
        t0: usize,
    },
    FixedSequence {
        arms: Vec<usize>,
    },
}

impl WarmstartPlan {
    pub fn per_arm(n: usize) -> Self {
        WarmstartPlan::RoundRobin {
            per_arm: Some(n),
            per_atom: None,
        }
    }

    pub fn per_atom(n: usize) -> Self {
        WarmstartPlan::RoundRobin {
            per_arm: None,
            per_atom: Some(n),
        }
    }

    pub fn validate(&self, arms: usize) -> Result<()> {
        match self {
            WarmstartPlan::RoundRobin { per_arm, per_atom } if per_arm.is_some() == per_atom.is_some() => Err(
                Error::InvalidInput("round_robin needs exactly one of per_arm and per_atom".into()),
            ),
            WarmstartPlan::NearUniform { epsilon, .. } if !(*epsilon > 0.0 && *epsilon <= 1.0) => {
                Err(Error::InvalidInput("near-uniform epsilon must lie in (0, 1]".into()))
            }
            WarmstartPlan::FixedSequence { arms: seq } => match seq.iter().find(|&&a| a >= arms) {
                Some(&arm) => Err(Error::ArmOutOfRange { arm, arms }),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// The deterministic arm schedule, or `None` for randomized plans.
    /// `x0` is the type whose rows define the atoms of each arm.
    pub fn schedule(&self, arms: usize, x0: &AgentType) -> Result<Option<Vec<usize>>> {
        self.validate(arms)?;
        Ok(match self {
            WarmstartPlan::RoundRobin { per_arm: Some(n), .. } => {
                Some((0..arms).flat_map(|i| std::iter::repeat_n(i, *n)).collect())
            }
            WarmstartPlan::RoundRobin { per_atom: Some(n), .. } => Some(atom_schedule(x0, *n)?),
            WarmstartPlan::RoundRobin { .. } => unreachable!("validated above"),
            WarmstartPlan::NearUniform { .. } => None,
            WarmstartPlan::FixedSequence { arms } => Some(arms.clone()),
        })
    }

    /// Number of warm-start rounds the plan produces.
    pub fn len(&self, arms: usize, x0: &AgentType) -> Result<usize> {
        Ok(match self {
            WarmstartPlan::NearUniform { t0, .. } => *t0,
            _ => self.schedule(arms, x0)?.map_or(0, |s| s.len()),
        })
    }

    pub fn is_empty(&self, arms: usize, x0: &AgentType) -> Result<bool> {
        Ok(self.len(arms, x0)? == 0)
    }
}

/// Greedy set cover: repeatedly play the arm covering the most atoms still
/// short of `n` observations (lowest arm on ties).
fn atom_schedule(x0: &AgentType, n: usize) -> Result<Vec<usize>> {
    let d = x0.dim();
    let support: Vec<Vec<usize>> = x0
        .rows()
        .iter()
        .map(|r| (0..d).filter(|&k| r[k] != 0.0).collect())
        .collect();
    if let Some(atom) = (0..d).find(|&k| !support.iter().any(|s| s.contains(&k))) {
        return Err(Error::InfeasiblePlan(format!("atom {atom} appears in no arm")));
    }
    let mut seen = vec![0usize; d];
    let mut out = Vec::new();
    while seen.iter().any(|&c| c < n) {
        let gain = |s: &Vec<usize>| s.iter().filter(|&&k| seen[k] < n).count();
        let (arm, best) = support
            .iter()
            .enumerate()
            .map(|(i, s)| (i, gain(s)))
            .fold((0, 0), |acc, (i, g)| if g > acc.1 { (i, g) } else { acc });
        debug_assert!(best > 0);
        for &k in &support[arm] {
            seen[k] += 1;
        }
        out.push(arm);
    }
    Ok(out)
}

/// Types of the experiment, by round.
pub trait TypeOracle {
    /// `(type_id, type)` of the agent arriving in round `t` (1-based).
    fn agent_at(&self, t: usize, streams: &Streams) -> Result<(usize, &AgentType)>;
}

/// Runs the warm start: arms from the plan, outcomes from the model.
pub fn generate_warmup<T: TypeOracle + ?Sized>(
    plan: &WarmstartPlan,
    inst: &Instance,
    types: &T,
    u_star: &ModelVector,
    streams: &Streams,
) -> Result<WarmupData> {
    let (_, x1) = types.agent_at(1, streams)?;
    let schedule = plan.schedule(inst.k, x1)?;
    let t0 = plan.len(inst.k, x1)?;
    let mut records = Vec::with_capacity(t0);
    for t in 1..=t0 {
        let (type_id, x) = types.agent_at(t, streams)?;
        let arm = match (&schedule, plan) {
            (Some(s), _) => s[t - 1],
            (None, WarmstartPlan::NearUniform { epsilon, .. }) => {
                let mut rng = streams.rng(t as u64, Purpose::WarmupArm);
                if rng.random::<f64>() < *epsilon {
                    rng.random_range(0..x.arms())
                } else {
                    0
                }
            }
            (None, _) => unreachable!("only near-uniform plans are randomized"),
        };
        let mut rng = streams.rng(t as u64, Purpose::Noise);
        let outcome = realize_outcome(u_star, x, arm, inst, &mut rng)?;
        records.push(RoundRecord::new(t, type_id, x, arm, outcome)?);
    }
    Ok(WarmupData { records })
}
