//! Prior-dependent primitives, threshold formulas, and the Monte Carlo audit
//! of Bayesian incentive-compatibility.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentType, Instance, ModelVector};
use crate::engine::{par_indexed, AgentModel, Episode, ExperimentConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::priors::{PosteriorState, Prior};
use crate::rng::{Purpose, Streams};
use crate::semantics::{HypercubeCover, Message, SemanticMap};
use crate::stats::{Welford, Z95};

/// Cells with fewer samples are reported but excluded from verdicts.
pub const MIN_CELL_COUNT: usize = 30;
/// Grid points per dimension for positive-part gaps on cells where the
/// gap changes sign.
const CELL_QUADRATURE: usize = 32;
/// Stream namespace of audit replicates, disjoint from plain runs.
const AUDIT_NAMESPACE: u64 = 0xA0D1;

/// Which gap enters `ε_TS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsConvention {
    /// `min Δ_{i,j}(x,m)`: general linear settings.
    Signed,
    /// `min E[(x_i·u − x_j·u)_+ | m]`: K-armed and combinatorial settings.
    PositivePart,
    /// `min E[(u_{R(p)} − u_{R(q)})_+ | R]` over positions `p < q`:
    /// rankings as messages.
    RankingPositivePart,
}

impl EpsConvention {
    pub fn default_for(smap: &SemanticMap, types: &[AgentType]) -> Self {
        if matches!(smap, SemanticMap::Ranking { .. }) {
            EpsConvention::RankingPositivePart
        } else if types.iter().all(AgentType::is_binary) {
            EpsConvention::PositivePart
        } else {
            EpsConvention::Signed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveMode {
    /// Enumeration (discrete priors) or integration (uniform box with a
    /// hypercube tiling).
    Exact,
    MonteCarlo {
        samples: usize,
    },
    /// `Exact` when available, otherwise `MonteCarlo`.
    Auto {
        samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageCell {
    pub type_index: usize,
    pub message: Message,
    pub probability: f64,
    /// Monte Carlo only.
    pub count: Option<usize>,
    pub ci_half_width: Option<f64>,
}

/// `Δ_{i,j}(x, m)` with `i = menu(x, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub type_index: usize,
    pub message: Message,
    pub arm: usize,
    pub competitor: usize,
    pub gap: f64,
    pub gap_positive: f64,
    pub ci_half_width: Option<f64>,
    pub count: Option<usize>,
}

/// `E[(u_a − u_b)_+ | R]` for arms `a` ranked above `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPair {
    pub message: Message,
    pub upper: usize,
    pub lower: usize,
    pub gap_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveEstimates {
    pub mode: PrimitiveMode,
    pub convention: EpsConvention,
    pub messages: Vec<MessageCell>,
    pub gaps: Vec<GapCell>,
    pub ranking_pairs: Vec<RankingPair>,
    /// Smallest probability among messages that occur.
    pub delta_ts: f64,
    /// Smallest probability over the whole message set: zero when some
    /// message is never produced. Thresholds need this to be positive.
    pub delta_ts_all: f64,
    pub eps_ts: Option<f64>,
    /// Messages of positive prior probability only enter the gap table.
    pub zero_probability: Vec<(usize, Message)>,
    /// Monte Carlo bins that received no sample.
    pub unestimated: Vec<(usize, Message)>,
    pub eta: Option<f64>,
    pub all_binary: bool,
    /// Some positive-part gap was integrated numerically.
    pub approximate: bool,
}

impl PrimitiveEstimates {
    /// Exact message probability, or the Monte Carlo frequency.
    pub fn probability(&self, type_index: usize, m: &Message) -> f64 {
        self.messages
            .iter()
            .find(|c| c.type_index == type_index && &c.message == m)
            .map_or(0.0, |c| c.probability)
    }

    pub fn gap(&self, type_index: usize, m: &Message, j: usize) -> Option<&GapCell> {
        self.gaps
            .iter()
            .find(|c| c.type_index == type_index && &c.message == m && c.competitor == j)
    }
}

/// Per-cell accumulator shared by the enumeration and sampling paths.
#[derive(Default)]
struct Bin {
    mass: f64,
    count: usize,
    gap: BTreeMap<usize, Welford>,
    gap_pos: BTreeMap<usize, Welford>,
    weighted: BTreeMap<usize, (f64, f64)>,
    ranking: BTreeMap<(usize, usize), Welford>,
}

pub fn estimate_primitives(
    prior: &Prior,
    smap: &SemanticMap,
    types: &[AgentType],
    mode: PrimitiveMode,
    seed: u64,
) -> Result<PrimitiveEstimates> {
    prior.validate()?;
    if types.is_empty() {
        return Err(Error::InvalidInput("primitives need at least one type".into()));
    }
    let exact_available = matches!(prior, Prior::Discrete { .. })
        || matches!(
            (prior, smap),
            (Prior::UniformBox { .. }, SemanticMap::HypercubeCover(_))
        );
    let mode = match mode {
        PrimitiveMode::Auto { .. } if exact_available => PrimitiveMode::Exact,
        PrimitiveMode::Auto { samples } => PrimitiveMode::MonteCarlo { samples },
        PrimitiveMode::Exact if !exact_available => {
            return Err(Error::Unsupported(
                "exact primitives need a discrete prior or a uniform box with a hypercube cover".into(),
            ))
        }
        m => m,
    };
    let convention = EpsConvention::default_for(smap, types);
    let d = prior.dim();
    let mut est = PrimitiveEstimates {
        mode,
        convention,
        messages: Vec::new(),
        gaps: Vec::new(),
        ranking_pairs: Vec::new(),
        delta_ts: 1.0,
        delta_ts_all: 1.0,
        eps_ts: None,
        zero_probability: Vec::new(),
        unestimated: Vec::new(),
        eta: None,
        all_binary: types.iter().all(AgentType::is_binary),
        approximate: false,
    };
    let ranking = matches!(smap, SemanticMap::Ranking { .. });

    for (ti, x) in types.iter().enumerate() {
        let mut bins: BTreeMap<Message, Bin> = BTreeMap::new();
        let mut menu_cache: BTreeMap<Message, usize> = BTreeMap::new();
        let mut arm_for = |m: &Message| -> Result<usize> {
            if let Some(&i) = menu_cache.get(m) {
                return Ok(i);
            }
            let i = smap.menu(x, m)?;
            menu_cache.insert(m.clone(), i);
            Ok(i)
        };
        match (mode, prior) {
            (PrimitiveMode::Exact, Prior::Discrete { models, .. }) => {
                // Normalized exactly as the posterior does, so message
                // probabilities agree bit for bit.
                let weights = PosteriorState::new(prior.clone())?
                    .weights()
                    .expect("discrete prior has weights");
                for (u, &w) in models.iter().zip(&weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let m = smap.apply(x.public_id(), u)?;
                    let i = arm_for(&m)?;
                    let bin = bins.entry(m.clone()).or_default();
                    bin.mass += w;
                    for j in (0..x.arms()).filter(|&j| j != i) {
                        let g = gap(x, i, j, u);
                        let e = bin.weighted.entry(j).or_insert((0.0, 0.0));
                        e.0 += w * g;
                        e.1 += w * g.max(0.0);
                    }
                    if ranking {
                        add_ranking_pairs(&mut bin.ranking, &m, u, Some(w));
                    }
                }
            }
            (PrimitiveMode::Exact, Prior::UniformBox { lo, hi }) => {
                let SemanticMap::HypercubeCover(cover) = smap else {
                    unreachable!()
                };
                for cell in 0..cover.cell_count() {
                    let Some((p, lo_c, hi_c)) = cell_overlap(cover, lo, hi, cell)? else {
                        continue;
                    };
                    let m = Message::Cell(cell);
                    let i = arm_for(&m)?;
                    let centroid: Vec<f64> = lo_c.iter().zip(&hi_c).map(|(a, b)| 0.5 * (a + b)).collect();
                    let bin = bins.entry(m).or_default();
                    bin.mass += p;
                    for j in (0..x.arms()).filter(|&j| j != i) {
                        let a = &x.rows()[i] - &x.rows()[j];
                        let g: f64 = a.iter().zip(&centroid).map(|(a, c)| a * c).sum();
                        let (gp, approx) = positive_part_on_box(a.as_slice(), &lo_c, &hi_c)?;
                        est.approximate |= approx;
                        bin.weighted.insert(j, (p * g, p * gp));
                    }
                }
            }
            (PrimitiveMode::MonteCarlo { samples }, _) => {
                if samples < 2 {
                    return Err(Error::InvalidInput(
                        "Monte Carlo primitives need at least two samples".into(),
                    ));
                }
                // Same draws for every type: common random numbers.
                let mut rng = Streams::new(seed, 0).rng(0, Purpose::Primitives);
                for _ in 0..samples {
                    let u = prior.sample(&mut rng);
                    let m = match smap.apply(x.public_id(), &u) {
                        Ok(m) => m,
                        Err(Error::OutOfDomain(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    let i = arm_for(&m)?;
                    let bin = bins.entry(m.clone()).or_default();
                    bin.count += 1;
                    for j in (0..x.arms()).filter(|&j| j != i) {
                        let g = gap(x, i, j, &u);
                        bin.gap.entry(j).or_default().push(g);
                        bin.gap_pos.entry(j).or_default().push(g.max(0.0));
                    }
                    if ranking {
                        add_ranking_pairs(&mut bin.ranking, &m, &u, None);
                    }
                }
                let n = samples as f64;
                for bin in bins.values_mut() {
                    bin.mass = bin.count as f64 / n;
                }
            }
            _ => unreachable!("mode resolved above"),
        }

        let listed: Vec<Message> = match smap.message_set(d) {
            Ok(all) => all,
            Err(_) => bins.keys().cloned().collect(),
        };
        let mc = matches!(mode, PrimitiveMode::MonteCarlo { .. });
        for m in listed.iter().filter(|m| !bins.contains_key(m)) {
            est.delta_ts_all = 0.0;
            if mc {
                est.unestimated.push((ti, m.clone()));
            } else {
                est.zero_probability.push((ti, m.clone()));
            }
            est.messages.push(MessageCell {
                type_index: ti,
                message: m.clone(),
                probability: 0.0,
                count: mc.then_some(0),
                ci_half_width: None,
            });
        }
        for (m, bin) in &bins {
            est.delta_ts = est.delta_ts.min(bin.mass);
            est.delta_ts_all = est.delta_ts_all.min(bin.mass);
            let n_total = match mode {
                PrimitiveMode::MonteCarlo { samples } => samples as f64,
                _ => 1.0,
            };
            est.messages.push(MessageCell {
                type_index: ti,
                message: m.clone(),
                probability: bin.mass,
                count: mc.then_some(bin.count),
                ci_half_width: mc.then(|| Z95 * (bin.mass * (1.0 - bin.mass) / n_total).sqrt()),
            });
            let i = arm_for(m)?;
            for j in (0..x.arms()).filter(|&j| j != i) {
                let cell = if mc {
                    let g = &bin.gap[&j];
                    GapCell {
                        type_index: ti,
                        message: m.clone(),
                        arm: i,
                        competitor: j,
                        gap: g.mean,
                        gap_positive: bin.gap_pos[&j].mean,
                        ci_half_width: Some(Z95 * g.std_error()),
                        count: Some(bin.count),
                    }
                } else {
                    let (g, gp) = bin.weighted[&j];
                    GapCell {
                        type_index: ti,
                        message: m.clone(),
                        arm: i,
                        competitor: j,
                        gap: g / bin.mass,
                        gap_positive: gp / bin.mass,
                        ci_half_width: None,
                        count: None,
                    }
                };
                est.gaps.push(cell);
            }
            if ranking && ti == 0 {
                for (&(a, b), w) in &bin.ranking {
                    let value = if mc { w.mean } else { w.mean / bin.mass };
                    est.ranking_pairs.push(RankingPair {
                        message: m.clone(),
                        upper: a,
                        lower: b,
                        gap_positive: value,
                    });
                }
            }
        }
    }

    let candidates: Vec<f64> = match convention {
        EpsConvention::Signed => est.gaps.iter().map(|c| c.gap).collect(),
        EpsConvention::PositivePart => est.gaps.iter().map(|c| c.gap_positive).collect(),
        EpsConvention::RankingPositivePart => est.ranking_pairs.iter().map(|c| c.gap_positive).collect(),
    };
    if est.messages.iter().all(|c| c.probability == 0.0) {
        est.delta_ts = 0.0;
    }
    est.eps_ts = candidates.into_iter().reduce(f64::min);
    est.eta = compute_eta(prior, smap, est.delta_ts_all);
    Ok(est)
}

fn gap(x: &AgentType, i: usize, j: usize, u: &ModelVector) -> f64 {
    x.rows()[i].dot(u.coords()) - x.rows()[j].dot(u.coords())
}

/// Accumulates `(u_a − u_b)_+` over ranked pairs. With a weight the entry
/// holds a weighted sum in `mean` (normalized by the caller).
fn add_ranking_pairs(acc: &mut BTreeMap<(usize, usize), Welford>, m: &Message, u: &ModelVector, weight: Option<f64>) {
    let Message::Ranking(r) = m else { return };
    let v = u.as_slice();
    for p in 0..r.len() {
        for q in p + 1..r.len() {
            let g = (v[r[p]] - v[r[q]]).max(0.0);
            let w = acc.entry((r[p], r[q])).or_default();
            match weight {
                Some(wt) => {
                    w.mean += wt * g;
                    w.count += 1;
                }
                None => w.push(g),
            }
        }
    }
}

/// `(mass, lower corner, upper corner)`.
type Overlap = (f64, Vec<f64>, Vec<f64>);

/// Probability mass and overlap box of a hypercube cell under the uniform
/// prior on `[lo, hi]`; `None` when the overlap is empty.
fn cell_overlap(cover: &HypercubeCover, lo: &[f64], hi: &[f64], cell: usize) -> Result<Option<Overlap>> {
    if lo.len() != cover.dim() {
        return Err(Error::DimensionMismatch {
            expected: cover.dim(),
            got: lo.len(),
        });
    }
    let idx = cover.unravel(cell)?;
    let mut p = 1.0;
    let mut a = Vec::with_capacity(lo.len());
    let mut b = Vec::with_capacity(lo.len());
    for k in 0..lo.len() {
        let c_lo = cover.origin[k] + cover.side() * idx[k] as f64;
        let c_hi = c_lo + cover.side();
        let (x, y) = (c_lo.max(lo[k]), c_hi.min(hi[k]));
        if y <= x {
            return Ok(None);
        }
        p *= (y - x) / (hi[k] - lo[k]);
        a.push(x);
        b.push(y);
    }
    Ok(Some((p, a, b)))
}

/// `E[(a·u)_+]` for `u` uniform on a box: exact when the sign is constant,
/// otherwise a midpoint rule (flagged approximate).
fn positive_part_on_box(a: &[f64], lo: &[f64], hi: &[f64]) -> Result<(f64, bool)> {
    let (mut min, mut max, mut mid) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        let (p, q) = (a[k] * lo[k], a[k] * hi[k]);
        min += p.min(q);
        max += p.max(q);
        mid += 0.5 * (p + q);
    }
    if min >= 0.0 {
        return Ok((mid, false));
    }
    if max <= 0.0 {
        return Ok((0.0, false));
    }
    let d = a.len();
    if d > 3 {
        return Err(Error::Unsupported(
            "positive-part gaps on sign-changing cells need d <= 3; use Monte Carlo primitives".into(),
        ));
    }
    let n = CELL_QUADRATURE;
    let total = n.pow(d as u32);
    let mut sum = 0.0;
    for flat in 0..total {
        let mut rest = flat;
        let mut v = 0.0;
        for k in 0..d {
            let i = rest % n;
            rest /= n;
            let u = lo[k] + (hi[k] - lo[k]) * (i as f64 + 0.5) / n as f64;
            v += a[k] * u;
        }
        sum += v.max(0.0);
    }
    Ok((sum / total as f64, true))
}

/// `η = δ_TS / ((2ε)^d · sup f)` for hypercube maps over priors with a
/// density. For a uniform box the ratio reduces to the smallest fraction of
/// a cell inside the box, computed directly so a perfect tiling gives 1
/// exactly.
pub fn compute_eta(prior: &Prior, smap: &SemanticMap, delta_ts: f64) -> Option<f64> {
    let SemanticMap::HypercubeCover(cover) = smap else {
        return None;
    };
    match prior {
        Prior::UniformBox { lo, hi } if lo.len() == cover.dim() => {
            let side = cover.side();
            let mut eta = 1.0;
            for k in 0..lo.len() {
                let tol = 1e-12 * side.max(1.0);
                let worst = (0..cover.extents[k])
                    .map(|i| {
                        let c_lo = cover.origin[k] + side * i as f64;
                        let c_hi = c_lo + side;
                        if c_lo >= lo[k] - tol && c_hi <= hi[k] + tol {
                            1.0
                        } else {
                            ((c_hi.min(hi[k]) - c_lo.max(lo[k])) / side).max(0.0)
                        }
                    })
                    .fold(1.0, f64::min);
                eta *= worst;
            }
            Some(eta)
        }
        Prior::Discrete { .. } => None,
        _ => prior
            .density_sup()
            .map(|f| delta_ts / (cover.side().powi(cover.dim() as i32) * f)),
    }
}

/// Which spectral-diversity constant `D` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Non-adaptive warm-up with bandit feedback: `D = C_X² R²`.
    NonAdaptive = 1,
    /// Adaptive warm-up with bandit feedback:
    /// `D = d (R C_X + C_U)² log(C_X² T + 3)`.
    Adaptive = 2,
    /// Semi-bandit feedback with binary types: `D = s R²`.
    SemiBandit = 3,
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scenario::NonAdaptive),
            2 => Ok(Scenario::Adaptive),
            3 => Ok(Scenario::SemiBandit),
            _ => Err(format!("scenario must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    pub c_cal: f64,
    pub scenario: Scenario,
    /// Exponent of the margin condition behind `ε_UCB`.
    #[serde(default = "one")]
    pub alpha_margin: f64,
    /// UCB exploration weight used in `N_UCB`.
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

fn default_eps_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3, 0.5]
}

impl ThresholdParams {
    pub fn new(c_cal: f64, scenario: Scenario) -> Self {
        Self {
            c_cal,
            scenario,
            alpha_margin: 1.0,
            rho: 1.0,
            eps_grid: default_eps_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub epsilon: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub c_cal: f64,
    pub scenario: Scenario,
    pub d_constant: f64,
    pub delta_ts: f64,
    pub eps_ts: Option<f64>,
    pub convention: EpsConvention,
    pub lambda: Vec<LambdaPoint>,
    pub n_ts: Option<f64>,
    pub n_ts_ceil: Option<u64>,
    pub eps_ucb: Option<f64>,
    pub n_ucb: Option<f64>,
    pub eta: Option<f64>,
    pub alpha_margin: f64,
    pub rho: f64,
    pub notes: Vec<String>,
}

/// `Λ(ε) = C (D/ε²) log(2/δ_TS)`.
pub fn lambda_of(c_cal: f64, d_constant: f64, delta_ts: f64, eps: f64) -> f64 {
    c_cal * d_constant / (eps * eps) * (2.0 / delta_ts).ln()
}

pub fn d_constant(inst: &Instance, scenario: Scenario) -> f64 {
    let (r, cx, cu) = (inst.noise, inst.c_x, inst.c_u);
    match scenario {
        Scenario::NonAdaptive => cx * cx * r * r,
        Scenario::Adaptive => inst.d as f64 * (r * cx + cu).powi(2) * (cx * cx * inst.horizon as f64 + 3.0).ln(),
        Scenario::SemiBandit => inst.sparsity as f64 * r * r,
    }
}

pub fn compute_thresholds(est: &PrimitiveEstimates, inst: &Instance, params: &ThresholdParams) -> Result<Thresholds> {
    if !(params.c_cal > 0.0) {
        return Err(Error::InvalidInput("c_cal must be positive".into()));
    }
    if !(est.delta_ts_all > 0.0) {
        return Err(Error::UndefinedThreshold(format!(
            "delta_TS = 0: {} message(s) have zero probability and {} were never sampled",
            est.zero_probability.len(),
            est.unestimated.len()
        )));
    }
    if params.scenario == Scenario::SemiBandit && !est.all_binary {
        return Err(Error::InvalidInput("scenario 3 requires binary types".into()));
    }
    let c = params.c_cal;
    let dc = d_constant(inst, params.scenario);
    let delta = est.delta_ts_all;
    let log_term = (2.0 / delta).ln();
    let mut notes = Vec::new();
    let lambda = params
        .eps_grid
        .iter()
        .filter(|e| **e > 0.0)
        .map(|&epsilon| LambdaPoint {
            epsilon,
            lambda: lambda_of(c, dc, delta, epsilon),
        })
        .collect();
    let (mut n_ts, mut eps_ucb, mut n_ucb) = (None, None, None);
    match est.eps_ts {
        Some(e) if e > 0.0 => {
            // Combinatorial semi-bandits pay an extra s² per atom.
            let s2 = match inst.feedback {
                crate::domain::Feedback::SemiBandit => (inst.sparsity * inst.sparsity) as f64,
                crate::domain::Feedback::Bandit => 1.0,
            };
            n_ts = Some(c * s2 / (e * e) * log_term);
            let eu = (e * delta / (c * inst.k as f64)).powf(1.0 / params.alpha_margin);
            eps_ucb = Some(eu);
            n_ucb = Some(
                (params.alpha_margin + 2.0) / (eu * eu) * (1.0 / eu).ln()
                    + params.rho * (inst.horizon.max(1) as f64).ln() / (eu * eu),
            );
        }
        Some(e) => notes.push(format!(
            "eps_TS = {e} is not positive; N_TS and UCB thresholds undefined"
        )),
        None => notes.push("no gap cells; eps_TS undefined".into()),
    }
    Ok(Thresholds {
        c_cal: c,
        scenario: params.scenario,
        d_constant: dc,
        delta_ts: delta,
        eps_ts: est.eps_ts,
        convention: est.convention,
        lambda,
        n_ts,
        n_ts_ceil: n_ts.map(|n| n.ceil() as u64),
        eps_ucb,
        n_ucb,
        eta: est.eta,
        alpha_margin: params.alpha_margin,
        rho: params.rho,
        notes,
    })
}

/// `g(ε) = inf_{x,m,j} Δ_{i,j}(x,m) − (ε/4)‖x_i − x_j‖₂`.
pub fn g_epsilon(est: &PrimitiveEstimates, types: &[AgentType], eps: f64) -> Result<f64> {
    if !est.unestimated.is_empty() {
        return Err(Error::UnestimatedCells(est.unestimated.clone()));
    }
    let mut g = f64::INFINITY;
    for c in &est.gaps {
        let x = types.get(c.type_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "gap table refers to type {} outside the type list",
                c.type_index
            ))
        })?;
        let dist = (&x.rows()[c.arm] - &x.rows()[c.competitor]).norm();
        g = g.min(c.gap - eps / 4.0 * dist);
    }
    if g.is_infinite() {
        return Err(Error::UndefinedThreshold("no gap cells".into()));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    /// Empirical conditional means of `(x_i − x_j)·u*` over replicates
    /// binned by the realized message.
    MonteCarlo,
    /// FPS over a discrete prior: within each replicate the message law and
    /// the conditional expectations are enumerated from the posterior, and
    /// only the history is sampled.
    ExactAssisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditParams {
    /// Audited round (1-based, after the warm start).
    pub round: usize,
    pub replicates: usize,
    /// Margin used to grade the verdict.
    pub epsilon: f64,
    pub mode: AuditMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl CellEstimate {
    fn new(mean: f64, std_error: f64) -> Self {
        Self {
            mean,
            std_error,
            ci_low: mean - Z95 * std_error,
            ci_high: mean + Z95 * std_error,
        }
    }

    fn from_welford(w: &Welford) -> Self {
        Self::new(w.mean, w.std_error())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCell {
    pub type_id: usize,
    pub message: Message,
    pub arm: usize,
    pub competitor: usize,
    /// Replicates in the bin (Monte Carlo) or with positive message
    /// probability (exact-assisted).
    pub count: usize,
    /// Bin frequency, or the mean message probability.
    pub mass: f64,
    /// `E[(x_i − x_j)·u* | M_t = m]`: the incentive the agent faces.
    pub incentive: CellEstimate,
    /// `E[(x_i − x_j)·u_t | M_t = m]` for the model the principal sampled.
    pub sampled: Option<CellEstimate>,
    pub low_power: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBin {
    pub type_id: usize,
    pub message: Message,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// The worst lower confidence bound clears `epsilon`.
    StrongBic {
        epsilon: f64,
    },
    Bic,
    WeakBic {
        epsilon: f64,
    },
    Violated,
    /// Every cell has fewer than the minimum sample count.
    LowPower,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::StrongBic { epsilon } => write!(f, "epsStrongBIC({epsilon})"),
            Verdict::Bic => write!(f, "BIC"),
            Verdict::WeakBic { epsilon } => write!(f, "epsWeakBIC({epsilon})"),
            Verdict::Violated => write!(f, "Violated"),
            Verdict::LowPower => write!(f, "LowPower"),
        }
    }
}

impl Verdict {
    /// Grades the worst lower confidence bound `low` against `epsilon`.
    pub fn from_lower_bound(low: f64, epsilon: f64) -> Self {
        if low > 0.0 && low >= epsilon {
            Verdict::StrongBic { epsilon: low }
        } else if low >= 0.0 {
            Verdict::Bic
        } else if low >= -epsilon {
            Verdict::WeakBic { epsilon }
        } else {
            Verdict::Violated
        }
    }

    /// BIC or stronger.
    pub fn is_bic(&self) -> bool {
        matches!(self, Verdict::StrongBic { .. } | Verdict::Bic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicAuditReport {
    pub round: usize,
    pub replicates: usize,
    pub mode: AuditMode,
    pub epsilon: f64,
    pub bins: Vec<AuditBin>,
    pub cells: Vec<AuditCell>,
    /// Messages in the message set that no replicate produced.
    pub empty_bins: Vec<AuditBin>,
    /// The cell with the smallest lower confidence bound among cells with
    /// enough samples.
    pub min_gap: Option<AuditCell>,
    pub verdict: Verdict,
    /// Warm-up noise is averaged over rather than conditioned on.
    pub marginalizes_warmup: bool,
}

/// `(m, P_t(m), per competitor: (j, P·gap(μ_t), Σ w·gap(u)))`.
type ExactView = Vec<(Message, f64, Vec<(usize, f64, f64)>)>;

/// One replicate's view of the audited round.
struct Observation {
    type_id: usize,
    message: Message,
    exact: ExactView,
    /// `(j, gap(u*), gap(u_t))` for the realized message.
    gaps: Vec<(usize, f64, Option<f64>)>,
    arm: usize,
}

/// Sums over replicates for the ratio estimators of one exact-assisted
/// bin. Per competitor: `[inc, inc², inc·p, samp, samp², samp·p]`.
#[derive(Default)]
struct ExactAcc {
    positive: usize,
    den: f64,
    den2: f64,
    cells: BTreeMap<usize, [f64; 6]>,
}

pub fn audit_bic(config: &ExperimentConfig, params: &AuditParams, workers: Option<usize>) -> Result<BicAuditReport> {
    config.validate()?;
    let t0 = config.instance.warm_start;
    if params.round <= t0 || params.round > config.instance.horizon {
        return Err(Error::InvalidInput(format!(
            "audit round {} must lie in ({t0}, {}]",
            params.round, config.instance.horizon
        )));
    }
    if params.replicates == 0 {
        return Err(Error::InvalidInput("audit needs at least one replicate".into()));
    }
    if config.agent_model != AgentModel::Compliant {
        return Err(Error::InvalidInput(
            "the audit assumes compliant agents before the audited round".into(),
        ));
    }
    let exact = params.mode == AuditMode::ExactAssisted;
    if exact && !(config.policy == PolicyKind::Fps && config.prior.is_discrete()) {
        return Err(Error::Unsupported(
            "exact-assisted audits need FPS over a discrete prior".into(),
        ));
    }

    let observations = par_indexed(params.replicates, workers, |r| {
        let streams = Streams::new(config.seed, r as u64).nested(AUDIT_NAMESPACE, 0, 0);
        let mut ep = Episode::start_with(config, streams, None, r)?;
        ep.run_to(params.round - 1)?;
        let (type_id, x) = ep.next_agent()?;
        let proposal = ep.propose(x.public_id())?;
        let arm = config.smap.menu(x, &proposal.message)?;
        let u_star = ep.u_star();
        let gaps = (0..x.arms())
            .filter(|&j| j != arm)
            .map(|j| {
                (
                    j,
                    gap(x, arm, j, u_star),
                    proposal.model.as_ref().map(|u| gap(x, arm, j, u)),
                )
            })
            .collect();
        let exact = if exact { exact_view(&ep, config, x)? } else { Vec::new() };
        Ok(Observation {
            type_id,
            message: proposal.message,
            exact,
            gaps,
            arm,
        })
    })?;

    let mut bins: BTreeMap<(usize, Message), usize> = BTreeMap::new();
    for o in &observations {
        *bins.entry((o.type_id, o.message.clone())).or_default() += 1;
    }
    let mut cells = Vec::new();
    if exact {
        let mut acc: BTreeMap<(usize, Message), (usize, ExactAcc)> = BTreeMap::new();
        let mut per_type: BTreeMap<usize, usize> = BTreeMap::new();
        for o in &observations {
            *per_type.entry(o.type_id).or_default() += 1;
        }
        for o in &observations {
            for (m, p, js) in &o.exact {
                let x = &config.types.support()[o.type_id];
                let i = config.smap.menu(x, m)?;
                let (_, a) = acc.entry((o.type_id, m.clone())).or_insert((i, ExactAcc::default()));
                a.positive += usize::from(*p > 0.0);
                a.den += p;
                a.den2 += p * p;
                for &(j, inc, samp) in js {
                    let c = a.cells.entry(j).or_insert([0.0; 6]);
                    for (slot, v) in c.iter_mut().zip([inc, inc * inc, inc * p, samp, samp * samp, samp * p]) {
                        *slot += v;
                    }
                }
            }
        }
        for ((type_id, m), (i, a)) in acc {
            let n = per_type[&type_id];
            let nf = n as f64;
            let mean_den = a.den / nf;
            if mean_den <= 0.0 {
                continue;
            }
            for (&j, c) in &a.cells {
                let ratio = |s: f64, s2: f64, sp: f64| {
                    let q = s / a.den;
                    // delta method on z_r = num_r − q·den_r
                    let var_z = ((s2 - 2.0 * q * sp + q * q * a.den2) / nf).max(0.0);
                    let se = if n > 1 {
                        (var_z / (nf - 1.0)).sqrt() / mean_den
                    } else {
                        0.0
                    };
                    CellEstimate::new(q, se)
                };
                let incentive = ratio(c[0], c[1], c[2]);
                let sampled = ratio(c[3], c[4], c[5]);
                cells.push(AuditCell {
                    type_id,
                    message: m.clone(),
                    arm: i,
                    competitor: j,
                    count: a.positive,
                    mass: mean_den,
                    incentive,
                    sampled: Some(sampled),
                    low_power: a.positive < MIN_CELL_COUNT,
                });
            }
        }
    } else {
        // (type, message) -> (count, competitor -> (incentive, sampled))
        type Bin = (usize, BTreeMap<usize, (Welford, Welford)>);
        let mut acc: BTreeMap<(usize, Message), Bin> = BTreeMap::new();
        for o in &observations {
            let (_, js) = acc
                .entry((o.type_id, o.message.clone()))
                .or_insert((o.arm, BTreeMap::new()));
            for &(j, g_star, g_model) in &o.gaps {
                let e = js.entry(j).or_default();
                e.0.push(g_star);
                if let Some(g) = g_model {
                    e.1.push(g);
                }
            }
        }
        let n = params.replicates as f64;
        for ((type_id, m), (i, js)) in acc {
            for (j, (w_star, w_model)) in js {
                let count = w_star.count as usize;
                cells.push(AuditCell {
                    type_id,
                    message: m.clone(),
                    arm: i,
                    competitor: j,
                    count,
                    mass: count as f64 / n,
                    incentive: CellEstimate::from_welford(&w_star),
                    sampled: (w_model.count > 0).then(|| CellEstimate::from_welford(&w_model)),
                    low_power: count < MIN_CELL_COUNT,
                });
            }
        }
    }

    let mut empty_bins = Vec::new();
    let seen_types: std::collections::BTreeSet<usize> = observations.iter().map(|o| o.type_id).collect();
    for &ti in &seen_types {
        if let Ok(all) = config.smap.message_set(config.instance.d) {
            for m in all {
                let covered = if exact {
                    cells.iter().any(|c| c.type_id == ti && c.message == m)
                } else {
                    bins.contains_key(&(ti, m.clone()))
                };
                if !covered {
                    empty_bins.push(AuditBin {
                        type_id: ti,
                        message: m,
                        count: 0,
                    });
                }
            }
        }
    }

    let min_gap = cells
        .iter()
        .filter(|c| !c.low_power)
        .min_by(|a, b| a.incentive.ci_low.total_cmp(&b.incentive.ci_low))
        .cloned();
    let verdict = match &min_gap {
        Some(c) => Verdict::from_lower_bound(c.incentive.ci_low, params.epsilon),
        None => Verdict::LowPower,
    };
    Ok(BicAuditReport {
        round: params.round,
        replicates: params.replicates,
        mode: params.mode,
        epsilon: params.epsilon,
        bins: bins
            .into_iter()
            .map(|((type_id, message), count)| AuditBin {
                type_id,
                message,
                count,
            })
            .collect(),
        cells,
        empty_bins,
        min_gap,
        verdict,
        marginalizes_warmup: true,
    })
}

/// Exact per-message quantities at the next round of `ep` for type `x`.
fn exact_view(ep: &Episode<'_>, config: &ExperimentConfig, x: &AgentType) -> Result<ExactView> {
    let post = ep.policy().posterior().expect("exact audits run FPS");
    let Prior::Discrete { models, .. } = post.prior() else {
        unreachable!()
    };
    let w = post.weights().expect("discrete posterior");
    let mean = post.mean()?;
    let mut by_message: BTreeMap<Message, (f64, BTreeMap<usize, f64>)> = BTreeMap::new();
    for (u, wk) in models.iter().zip(&w) {
        let m = config.smap.apply(x.public_id(), u)?;
        let i = config.smap.menu(x, &m)?;
        let e = by_message.entry(m).or_default();
        e.0 += wk;
        for j in (0..x.arms()).filter(|&j| j != i) {
            *e.1.entry(j).or_default() += wk * gap(x, i, j, u);
        }
    }
    by_message
        .into_iter()
        .map(|(m, (p, js))| {
            let i = config.smap.menu(x, &m)?;
            let cells = js
                .into_iter()
                .map(|(j, samp)| (j, p * gap(x, i, j, &mean), samp))
                .collect();
            Ok((m, p, cells))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Feedback;
    use crate::engine::TypeSource;
    use crate::policies::WarmstartPlan;

    fn mv(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec())
    }

    fn two_model_prior() -> Prior {
        Prior::Discrete {
            models: vec![mv(&[0.9, 0.1]), mv(&[0.2, 0.8])],
            weights: vec![0.5, 0.5],
        }
    }

    fn argmax2() -> SemanticMap {
        SemanticMap::argmax_direct(&[AgentType::identity(2)]).unwrap()
    }

    fn inst(noise: f64) -> Instance {
        Instance {
            d: 2,
            k: 2,
            c_u: 1.0,
            c_x: 1.0,
            sparsity: 1,
            noise,
            horizon: 100,
            warm_start: 0,
            feedback: Feedback::Bandit,
        }
    }

    fn two_model_exact() -> PrimitiveEstimates {
        estimate_primitives(
            &two_model_prior(),
            &argmax2(),
            &[AgentType::identity(2)],
            PrimitiveMode::Exact,
            0,
        )
        .unwrap()
    }

    #[test]
    fn two_model_primitives_are_exact() {
        let est = two_model_exact();
        assert_eq!(est.delta_ts, 0.5);
        assert_eq!(est.delta_ts_all, 0.5);
        assert_eq!(est.convention, EpsConvention::PositivePart);
        let g0 = est.gap(0, &Message::Arm(0), 1).unwrap();
        let g1 = est.gap(0, &Message::Arm(1), 0).unwrap();
        assert!((g0.gap - 0.8).abs() < 1e-15 && (g1.gap - 0.6).abs() < 1e-15);
        assert!((est.eps_ts.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(est.eta, None);
    }

    #[test]
    fn threshold_formulas() {
        let est = two_model_exact();
        let th = compute_thresholds(&est, &inst(1.0), &ThresholdParams::new(1.0, Scenario::NonAdaptive)).unwrap();
        let n_ts = 4f64.ln() / 0.36;
        assert!((th.n_ts.unwrap() - n_ts).abs() < 1e-12);
        assert_eq!(th.n_ts_ceil, Some(4));
        assert!((lambda_of(1.0, 1.0, 0.5, 0.1) - 100.0 * 4f64.ln()).abs() < 1e-9);
        let p = th.lambda.iter().find(|p| p.epsilon == 0.1).unwrap();
        assert!((p.lambda - 138.629_436_111_989_06).abs() < 1e-9);
        // ε_UCB = (0.6 · 0.5 / 2)^1
        let eu = th.eps_ucb.unwrap();
        assert!((eu - 0.15).abs() < 1e-15);
        let n_ucb = 3.0 / (eu * eu) * (1.0 / eu).ln() + 100f64.ln() / (eu * eu);
        assert!((th.n_ucb.unwrap() - n_ucb).abs() < 1e-9);

        let mut semi = inst(1.0);
        semi.feedback = Feedback::SemiBandit;
        semi.sparsity = 2;
        let th = compute_thresholds(&est, &semi, &ThresholdParams::new(1.0, Scenario::SemiBandit)).unwrap();
        assert!((th.n_ts.unwrap() - 4.0 * n_ts).abs() < 1e-12);
        assert!((th.d_constant - 2.0).abs() < 1e-15);
    }

    #[test]
    fn d_constants_per_scenario() {
        let mut i = inst(0.5);
        i.c_x = 2.0;
        i.c_u = 3.0;
        i.sparsity = 2;
        assert!((d_constant(&i, Scenario::NonAdaptive) - 1.0).abs() < 1e-15);
        let adaptive = 2.0 * 16.0 * (4.0f64 * 100.0 + 3.0).ln();
        assert!((d_constant(&i, Scenario::Adaptive) - adaptive).abs() < 1e-12);
        assert!((d_constant(&i, Scenario::SemiBandit) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lambda_is_monotone() {
        let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 0.05).collect();
        for d in [0.5, 1.0, 4.0] {
            for w in grid.windows(2) {
                assert!(lambda_of(1.0, d, 0.3, w[1]) < lambda_of(1.0, d, 0.3, w[0]));
            }
            assert!(lambda_of(1.0, d * 2.0, 0.3, 0.1) > lambda_of(1.0, d, 0.3, 0.1));
        }
    }

    #[test]
    fn never_produced_messages_leave_thresholds_undefined() {
        let prior = Prior::Discrete {
            models: vec![mv(&[0.9, 0.1]), mv(&[0.7, 0.3])],
            weights: vec![0.5, 0.5],
        };
        let est = estimate_primitives(&prior, &argmax2(), &[AgentType::identity(2)], PrimitiveMode::Exact, 0).unwrap();
        assert_eq!(est.zero_probability, vec![(0, Message::Arm(1))]);
        assert_eq!(est.delta_ts, 1.0);
        assert_eq!(est.delta_ts_all, 0.0);
        let err = compute_thresholds(&est, &inst(1.0), &ThresholdParams::new(1.0, Scenario::NonAdaptive));
        assert!(matches!(err, Err(Error::UndefinedThreshold(_))));
    }

    #[test]
    fn point_mass_has_a_certain_message() {
        let u = mv(&[0.3, 0.6]);
        let prior = Prior::point_mass(u.clone());
        let reveal = SemanticMap::full_reveal(vec![u]).unwrap();
        let est = estimate_primitives(&prior, &reveal, &[AgentType::identity(2)], PrimitiveMode::Exact, 0).unwrap();
        assert_eq!((est.delta_ts, est.delta_ts_all), (1.0, 1.0));
        let est = estimate_primitives(&prior, &argmax2(), &[AgentType::identity(2)], PrimitiveMode::Exact, 0).unwrap();
        assert_eq!(est.probability(0, &Message::Arm(1)), 1.0);
        assert_eq!(est.delta_ts, 1.0);
    }

    #[test]
    fn ranking_messages_on_the_unit_cube() {
        let prior = Prior::UniformBox {
            lo: vec![0.0; 3],
            hi: vec![1.0; 3],
        };
        let est = estimate_primitives(
            &prior,
            &SemanticMap::ranking(),
            &[AgentType::identity(3)],
            PrimitiveMode::Auto { samples: 100_000 },
            7,
        )
        .unwrap();
        assert!(matches!(est.mode, PrimitiveMode::MonteCarlo { .. }));
        assert_eq!(est.convention, EpsConvention::RankingPositivePart);
        assert_eq!(est.messages.len(), 6);
        assert!((est.delta_ts - 1.0 / 6.0).abs() <= 0.02, "{}", est.delta_ts);
        // Adjacent order statistics of 3 uniforms are 1/4 apart on average.
        let eps = est.eps_ts.unwrap();
        assert!((eps - 0.25).abs() < 0.01, "{eps}");
    }

    #[test]
    fn exact_and_monte_carlo_primitives_agree() {
        let prior = Prior::Discrete {
            models: vec![
                mv(&[0.9, 0.1, 0.0]),
                mv(&[0.2, 0.8, 0.1]),
                mv(&[0.1, 0.3, 0.7]),
                mv(&[0.5, 0.4, 0.2]),
            ],
            weights: vec![0.4, 0.3, 0.2, 0.1],
        };
        let q = SemanticMap::argmax_direct(&[AgentType::identity(3)]).unwrap();
        let types = [AgentType::identity(3)];
        let exact = estimate_primitives(&prior, &q, &types, PrimitiveMode::Exact, 0).unwrap();
        let mc = estimate_primitives(&prior, &q, &types, PrimitiveMode::MonteCarlo { samples: 100_000 }, 3).unwrap();
        for c in &exact.messages {
            let p = mc.probability(c.type_index, &c.message);
            let se = (c.probability * (1.0 - c.probability) / 100_000.0).sqrt();
            assert!((p - c.probability).abs() <= 3.0 * se);
        }
        for c in &exact.gaps {
            let m = mc.gap(c.type_index, &c.message, c.competitor).unwrap();
            let se = m.ci_half_width.unwrap() / Z95;
            assert!((m.gap - c.gap).abs() <= 3.0 * se + 1e-12, "{:?} vs {:?}", m, c);
        }
    }

    #[test]
    fn delta_matches_the_prior_message_distribution() {
        let prior = Prior::Discrete {
            models: vec![
                mv(&[0.9, 0.1, 0.0]),
                mv(&[0.2, 0.8, 0.1]),
                mv(&[0.1, 0.3, 0.7]),
                mv(&[0.5, 0.4, 0.2]),
            ],
            weights: vec![0.4, 0.3, 0.2, 0.1],
        };
        let a = AgentType::identity(3);
        let b = AgentType::new(vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]], 1).unwrap();
        let types = [a, b];
        let q = SemanticMap::argmax_direct(&types).unwrap();
        let est = estimate_primitives(&prior, &q, &types, PrimitiveMode::Exact, 0).unwrap();
        let post = PosteriorState::new(prior).unwrap();
        let mut min_pos = f64::INFINITY;
        let mut min_all = f64::INFINITY;
        for x in &types {
            for (_, p) in post.message_distribution(&q, x.public_id(), None).unwrap().entries {
                min_all = min_all.min(p);
                if p > 0.0 {
                    min_pos = min_pos.min(p);
                }
            }
        }
        assert_eq!(est.delta_ts, min_pos);
        assert_eq!(est.delta_ts_all, min_all);
    }

    #[test]
    fn eta_on_tiled_boxes() {
        for (lo, hi, origin, eps, n) in [
            (0.0, 1.0, 0.0, 0.25, 2usize),
            (0.0, 1.0, 0.0, 0.1, 5),
            (-1.0, 1.0, -1.0, 0.25, 4),
            (0.0, 0.9, 0.0, 0.15, 3),
        ] {
            for d in 1..=3 {
                let prior = Prior::UniformBox {
                    lo: vec![lo; d],
                    hi: vec![hi; d],
                };
                let q = SemanticMap::HypercubeCover(HypercubeCover::new(vec![origin; d], eps, vec![n; d]).unwrap());
                let types = [AgentType::identity(d.max(2)).rows()[..2]
                    .iter()
                    .map(|r| r.iter().take(d).copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()]
                .map(|rows| AgentType::new(rows, 0).unwrap());
                let est = estimate_primitives(&prior, &q, &types, PrimitiveMode::Exact, 0).unwrap();
                assert_eq!(est.eta, Some(1.0), "{lo} {hi} eps={eps} d={d}");
                let cell = (2.0 * eps).powi(d as i32) / (hi - lo).powi(d as i32);
                assert!((est.delta_ts_all - cell).abs() < 1e-12);
            }
        }
        // a cover sticking out of the box
        let prior = Prior::UniformBox {
            lo: vec![0.0],
            hi: vec![1.0],
        };
        let q = SemanticMap::HypercubeCover(HypercubeCover::new(vec![0.0], 0.3, vec![2]).unwrap());
        let eta = compute_eta(&prior, &q, 0.4).unwrap();
        assert!((eta - 0.4 / 0.6).abs() < 1e-12);
        assert_eq!(compute_eta(&two_model_prior(), &q, 0.5), None);
    }

    #[test]
    fn eta_for_other_densities() {
        let prior = Prior::UniformBall { radius: 1.0, dim: 2 };
        let q = SemanticMap::HypercubeCover(HypercubeCover::new(vec![-1.0, -1.0], 0.5, vec![2, 2]).unwrap());
        let f = 1.0 / std::f64::consts::PI;
        let eta = compute_eta(&prior, &q, 0.25).unwrap();
        assert!((eta - 0.25 / (1.0 * f)).abs() < 1e-12);
    }

    #[test]
    fn hypercube_exact_gaps_match_sampling() {
        let prior = Prior::UniformBox {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let q = SemanticMap::HypercubeCover(HypercubeCover::new(vec![0.0, 0.0], 0.25, vec![2, 2]).unwrap());
        let x = AgentType::new(vec![vec![1.0, -0.5], vec![-0.3, 0.9], vec![0.2, 0.2]], 0).unwrap();
        let exact = estimate_primitives(&prior, &q, std::slice::from_ref(&x), PrimitiveMode::Exact, 0).unwrap();
        assert_eq!(exact.convention, EpsConvention::Signed);
        let mc = estimate_primitives(&prior, &q, &[x], PrimitiveMode::MonteCarlo { samples: 100_000 }, 5).unwrap();
        for c in &exact.gaps {
            let m = mc.gap(0, &c.message, c.competitor).unwrap();
            let se = m.ci_half_width.unwrap() / Z95;
            assert!((m.gap - c.gap).abs() <= 3.0 * se);
            // the positive part uses the same samples; its error is no larger
            assert!((m.gap_positive - c.gap_positive).abs() <= 3.0 * se + 1e-3);
        }
    }

    #[test]
    fn g_epsilon_examples() {
        let est = two_model_exact();
        let types = [AgentType::identity(2)];
        let g = g_epsilon(&est, &types, 0.1).unwrap();
        assert!((g - (0.6 - 0.025 * 2f64.sqrt())).abs() < 1e-12);
        assert!((g_epsilon(&est, &types, 0.0).unwrap() - 0.6).abs() < 1e-15);
        let grid: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let gs: Vec<f64> = grid.iter().map(|&e| g_epsilon(&est, &types, e).unwrap()).collect();
        assert!(gs.windows(2).all(|w| w[1] <= w[0]));

        let mut partial = est.clone();
        partial.unestimated.push((0, Message::Arm(1)));
        assert!(matches!(
            g_epsilon(&partial, &types, 0.1),
            Err(Error::UnestimatedCells(_))
        ));
    }

    #[test]
    fn verdict_grading() {
        assert_eq!(Verdict::from_lower_bound(0.3, 0.1), Verdict::StrongBic { epsilon: 0.3 });
        assert_eq!(Verdict::from_lower_bound(0.05, 0.1), Verdict::Bic);
        assert_eq!(Verdict::from_lower_bound(0.0, 0.1), Verdict::Bic);
        assert_eq!(Verdict::from_lower_bound(-0.05, 0.1), Verdict::WeakBic { epsilon: 0.1 });
        assert_eq!(Verdict::from_lower_bound(-0.2, 0.1), Verdict::Violated);
        assert_eq!(Verdict::from_lower_bound(0.2, 0.0), Verdict::StrongBic { epsilon: 0.2 });
        assert_eq!(Verdict::StrongBic { epsilon: 0.5 }.to_string(), "epsStrongBIC(0.5)");
    }

    fn config(t0: usize, per_arm: usize) -> ExperimentConfig {
        let mut i = inst(1.0);
        i.horizon = t0 + 1;
        i.warm_start = t0;
        ExperimentConfig {
            instance: i,
            prior: two_model_prior(),
            smap: argmax2(),
            policy: PolicyKind::Fps,
            warmup: if per_arm == 0 {
                WarmstartPlan::FixedSequence { arms: vec![] }
            } else {
                WarmstartPlan::per_arm(per_arm)
            },
            types: TypeSource::Homogeneous {
                x0: AgentType::identity(2),
            },
            agent_model: AgentModel::Compliant,
            seed: 17,
            replicates: 1,
        }
    }

    fn params(round: usize, replicates: usize, mode: AuditMode) -> AuditParams {
        AuditParams {
            round,
            replicates,
            epsilon: 0.0,
            mode,
        }
    }

    #[test]
    fn point_mass_audit_is_exact() {
        let mut cfg = config(0, 0);
        cfg.prior = Prior::point_mass(mv(&[0.2, 0.8]));
        let r = audit_bic(&cfg, &params(1, 100, AuditMode::MonteCarlo), None).unwrap();
        assert_eq!(r.cells.len(), 1);
        let c = &r.cells[0];
        assert_eq!((c.arm, c.competitor, c.count), (1, 0, 100));
        assert!((c.incentive.mean - 0.6).abs() < 1e-15);
        assert_eq!(c.incentive.ci_low, c.incentive.ci_high);
        assert!(matches!(r.verdict, Verdict::StrongBic { epsilon } if (epsilon - 0.6).abs() < 1e-15));
        assert_eq!(
            r.empty_bins,
            vec![AuditBin {
                type_id: 0,
                message: Message::Arm(0),
                count: 0
            }]
        );
    }

    #[test]
    fn round_one_exact_audit_reproduces_the_gap_table() {
        let cfg = config(0, 0);
        let r = audit_bic(&cfg, &params(1, 500, AuditMode::ExactAssisted), None).unwrap();
        let est = two_model_exact();
        assert_eq!(r.cells.len(), 2);
        for c in &r.cells {
            let delta = est.gap(0, &c.message, c.competitor).unwrap().gap;
            assert!((c.sampled.unwrap().mean - delta).abs() <= 1e-12);
            // u* is independent of the round-1 sample, so the incentive is the prior gap.
            let prior_gap = if c.arm == 0 { 0.1 } else { -0.1 };
            assert!((c.incentive.mean - prior_gap).abs() <= 1e-12);
            assert!((c.mass - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn audit_bins_account_for_every_replicate() {
        let cfg = config(4, 2);
        let r = audit_bic(&cfg, &params(5, 300, AuditMode::MonteCarlo), None).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 300);
        let same = audit_bic(&cfg, &params(5, 300, AuditMode::MonteCarlo), Some(3)).unwrap();
        assert_eq!(r, same);
    }

    #[test]
    fn warm_start_creates_incentives() {
        let cfg = config(8, 4);
        let r = audit_bic(&cfg, &params(9, 2000, AuditMode::MonteCarlo), None).unwrap();
        let low = r.min_gap.as_ref().unwrap().incentive.ci_low;
        assert!(low > 0.0, "{low}");
        assert!(r.verdict.is_bic());

        let exact = audit_bic(&cfg, &params(9, 2000, AuditMode::ExactAssisted), None).unwrap();
        assert!(exact.min_gap.unwrap().incentive.ci_low > 0.0);
    }

    #[test]
    fn audit_rejects_bad_requests() {
        let cfg = config(2, 1);
        assert!(audit_bic(&cfg, &params(2, 10, AuditMode::MonteCarlo), None).is_err());
        assert!(audit_bic(&cfg, &params(4, 10, AuditMode::MonteCarlo), None).is_err());
        let mut ucb = cfg.clone();
        ucb.policy = PolicyKind::Ucb { rho: 1.0 };
        assert!(matches!(
            audit_bic(&ucb, &params(3, 10, AuditMode::ExactAssisted), None),
            Err(Error::Unsupported(_))
        ));
        audit_bic(&ucb, &params(3, 10, AuditMode::MonteCarlo), None).unwrap();
    }

    #[test]
    fn scenario_serializes_as_an_integer() {
        let p: ThresholdParams = serde_json::from_str(r#"{"c_cal": 2.0, "scenario": 3}"#).unwrap();
        assert_eq!(p.scenario, Scenario::SemiBandit);
        assert!(serde_json::from_str::<ThresholdParams>(r#"{"c_cal": 2.0, "scenario": 4}"#).is_err());
        assert_eq!(serde_json::to_string(&Scenario::Adaptive).unwrap(), "2");
    }
}
