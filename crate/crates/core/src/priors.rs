//! Prior families, exact Bayesian updates and posterior sampling.
//!
//! | prior        | posterior representation             | sampling                     |
//! |--------------|--------------------------------------|------------------------------|
//! | Discrete     | normalized log-weights               | categorical                  |
//! | Gaussian     | precision and precision-weighted mean | Cholesky of the precision    |
//! | UniformBall  | Gaussian likelihood stats + support  | rejection, grid fallback     |
//! | UniformBox   | Gaussian likelihood stats + support  | rejection, grid fallback     |
//!
//! Bandit feedback contributes one scalar observation `y = f·u + noise` with
//! variance `R²‖f‖²`; semi-bandit feedback contributes one observation per
//! revealed coordinate with variance `R²`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{Feedback, Instance, ModelVector, RoundRecord};
use crate::error::{Error, Result};
use crate::semantics::{Message, SemanticMap};

/// Consecutive rejections tolerated before the grid fallback.
pub const MAX_REJECT: usize = 10_000;
/// Grid resolution of the fallback sampler.
pub const FALLBACK_GRID: usize = 64;
/// Largest dimension the fallback grid supports.
pub const FALLBACK_MAX_DIM: usize = 3;

const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Residual tolerance for noise-free observations under a discrete prior.
const EXACT_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    Discrete {
        models: Vec<ModelVector>,
        weights: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    UniformBall {
        radius: f64,
        dim: usize,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl Prior {
    pub fn point_mass(u: ModelVector) -> Self {
        Prior::Discrete {
            models: vec![u],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Discrete { models, .. } => models.first().map_or(0, ModelVector::dim),
            Prior::Gaussian { mean, .. } => mean.len(),
            Prior::UniformBall { dim, .. } => *dim,
            Prior::UniformBox { lo, .. } => lo.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Prior::Discrete { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        match self {
            Prior::Discrete { models, weights } => {
                if models.is_empty() {
                    return bad("discrete prior needs at least one model".into());
                }
                if models.len() != weights.len() {
                    return bad(format!("{} models but {} weights", models.len(), weights.len()));
                }
                let d = models[0].dim();
                if d == 0 || models.iter().any(|m| m.dim() != d) {
                    return bad("discrete prior models must share a positive dimension".into());
                }
                if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                    return bad("discrete prior weights must be finite and non-negative".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > WEIGHT_SUM_TOL {
                    return bad(format!("discrete prior weights sum to {total}, not 1"));
                }
            }
            Prior::Gaussian { mean, cov } => {
                let d = mean.len();
                if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return bad("gaussian prior needs a d-vector mean and a d×d covariance".into());
                }
                let m = self.gaussian_cov().expect("gaussian");
                if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                    return bad("gaussian prior covariance is not symmetric".into());
                }
                if Cholesky::new(m).is_none() {
                    return bad("gaussian prior covariance is not positive definite".into());
                }
            }
            Prior::UniformBall { radius, dim } => {
                if !(*radius > 0.0 && radius.is_finite()) || *dim == 0 {
                    return bad("uniform ball needs a positive radius and dimension".into());
                }
            }
            Prior::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return bad("uniform box bounds must be non-empty and equal length".into());
                }
                if lo
                    .iter()
                    .zip(hi)
                    .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
                {
                    return bad("uniform box needs lo < hi in every coordinate".into());
                }
            }
        }
        Ok(())
    }

    fn gaussian_cov(&self) -> Option<DMatrix<f64>> {
        match self {
            Prior::Gaussian { cov, .. } => {
                let d = cov.len();
                Some(DMatrix::from_fn(d, d, |i, j| cov[i][j]))
            }
            _ => None,
        }
    }

    /// Whether `u` lies in the support of a uniform prior. Always true for
    /// other families.
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            Prior::UniformBall { radius, .. } => u.norm() <= *radius,
            Prior::UniformBox { lo, hi } => u.iter().zip(lo.iter().zip(hi)).all(|(x, (a, b))| *a <= *x && *x <= *b),
            _ => true,
        }
    }

    /// Axis-aligned box containing the support, for bounded priors.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Prior::UniformBall { radius, dim } => Some((vec![-radius; *dim], vec![*radius; *dim])),
            Prior::UniformBox { lo, hi } => Some((lo.clone(), hi.clone())),
            _ => None,
        }
    }

    /// `sup f` of the prior density; `None` for discrete priors.
    pub fn density_sup(&self) -> Option<f64> {
        match self {
            Prior::Discrete { .. } => None,
            Prior::Gaussian { .. } => {
                let cov = self.gaussian_cov()?;
                let d = cov.nrows() as f64;
                Some(1.0 / ((2.0 * PI).powf(d / 2.0) * cov.determinant().sqrt()))
            }
            Prior::UniformBall { radius, dim } => Some(1.0 / ball_volume(*dim, *radius)),
            Prior::UniformBox { lo, hi } => Some(1.0 / lo.iter().zip(hi).map(|(a, b)| b - a).product::<f64>()),
        }
    }

    /// One exact draw `u* ~ prior`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelVector {
        match self {
            Prior::Discrete { models, weights } => models[categorical(weights.iter().copied(), rng)].clone(),
            Prior::Gaussian { mean, .. } => {
                let cov = self.gaussian_cov().expect("gaussian");
                let l = Cholesky::new(cov).expect("validated covariance").l();
                let z = standard_normal(mean.len(), rng);
                ModelVector::from_dvector(DVector::from_column_slice(mean) + l * z)
            }
            Prior::UniformBall { radius, dim } => {
                // Uniform direction, radius with density ∝ r^{d-1}.
                let mut z = standard_normal(*dim, rng);
                let mut n = z.norm();
                while n == 0.0 {
                    z = standard_normal(*dim, rng);
                    n = z.norm();
                }
                let r = radius * rng.random::<f64>().powf(1.0 / *dim as f64);
                ModelVector::from_dvector(z * (r / n))
            }
            Prior::UniformBox { lo, hi } => ModelVector::new(
                lo.iter()
                    .zip(hi)
                    .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                    .collect(),
            ),
        }
    }
}

/// Volume of the `d`-ball of the given radius.
pub fn ball_volume(dim: usize, radius: f64) -> f64 {
    // Γ(d/2 + 1) by the recursion from Γ(1) = 1 or Γ(1/2) = √π.
    let mut gamma = if dim.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut a = if dim.is_multiple_of(2) { 1.0 } else { 0.5 };
    let target = dim as f64 / 2.0 + 1.0;
    while a < target - 1e-9 {
        gamma *= a;
        a += 1.0;
    }
    PI.powf(dim as f64 / 2.0) / gamma * radius.powi(dim as i32)
}

fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Inverse-CDF categorical draw over non-negative weights (not necessarily
/// normalized).
pub fn categorical<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gaussian likelihood statistics: `precision = prior precision + Σ f fᵀ/σ²`
/// and `shift = prior shift + Σ f y/σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl GaussianStats {
    fn absorb(&mut self, f: &DVector<f64>, y: f64, var: f64) {
        let d = f.len();
        for i in 0..d {
            for j in i..d {
                let v = f[i] * f[j] / var;
                self.precision[(i, j)] += v;
                if i != j {
                    self.precision[(j, i)] += v;
                }
            }
        }
        self.shift.axpy(y / var, f, 1.0);
    }

    /// `uᵀΛu − 2 bᵀu`, i.e. −2 × log-likelihood up to a constant.
    fn quad(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.precision * u)[(0, 0)] - 2.0 * self.shift.dot(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum PosteriorInner {
    Discrete {
        log_weights: Vec<f64>,
    },
    Gaussian(GaussianStats),
    /// Uniform prior: likelihood statistics (prior precision zero) and the
    /// prior's support as a hard constraint.
    Truncated(GaussianStats),
}

/// Where a truncated-Gaussian draw came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRoute {
    Exact,
    GaussianRejection,
    LikelihoodRejection,
    GridFallback,
}

/// Posterior over models given the observations absorbed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    prior: Prior,
    inner: PosteriorInner,
    observations: usize,
}

/// Probability of each message of a semantic map under a posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageDistribution {
    pub entries: Vec<(Message, f64)>,
    /// True when computed by grid quadrature rather than enumeration.
    pub approximate: bool,
    /// Quadrature mass that fell outside the map's domain.
    pub unmapped_mass: f64,
}

impl MessageDistribution {
    pub fn probability(&self, m: &Message) -> f64 {
        self.entries.iter().find(|(k, _)| k == m).map_or(0.0, |(_, p)| *p)
    }
}

impl PosteriorState {
    pub fn new(prior: Prior) -> Result<Self> {
        prior.validate()?;
        let d = prior.dim();
        let inner = match &prior {
            Prior::Discrete { weights, .. } => PosteriorInner::Discrete {
                log_weights: weights.iter().map(|w| w.ln()).collect(),
            },
            Prior::Gaussian { mean, .. } => {
                let cov = prior.gaussian_cov().expect("gaussian");
                let precision = cov
                    .try_inverse()
                    .ok_or_else(|| Error::InvalidInput("gaussian prior covariance is singular".into()))?;
                let precision = 0.5 * (&precision + precision.transpose());
                let shift = &precision * DVector::from_column_slice(mean);
                PosteriorInner::Gaussian(GaussianStats { precision, shift })
            }
            Prior::UniformBall { .. } | Prior::UniformBox { .. } => PosteriorInner::Truncated(GaussianStats {
                precision: DMatrix::zeros(d, d),
                shift: DVector::zeros(d),
            }),
        };
        let mut state = Self {
            prior,
            inner,
            observations: 0,
        };
        if let PosteriorInner::Discrete { log_weights } = &mut state.inner {
            normalize(log_weights)?;
        }
        Ok(state)
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    /// Normalized posterior weights (discrete priors only).
    pub fn weights(&self) -> Option<Vec<f64>> {
        match &self.inner {
            PosteriorInner::Discrete { log_weights } => Some(log_weights.iter().map(|l| l.exp()).collect()),
            _ => None,
        }
    }

    pub fn log_weights(&self) -> Option<&[f64]> {
        match &self.inner {
            PosteriorInner::Discrete { log_weights } => Some(log_weights),
            _ => None,
        }
    }

    pub fn gaussian_stats(&self) -> Option<&GaussianStats> {
        match &self.inner {
            PosteriorInner::Gaussian(s) | PosteriorInner::Truncated(s) => Some(s),
            _ => None,
        }
    }

    /// Posterior mean, where it has a closed form.
    pub fn mean(&self) -> Result<ModelVector> {
        match (&self.inner, &self.prior) {
            (PosteriorInner::Discrete { log_weights }, Prior::Discrete { models, .. }) => {
                let mut acc = DVector::zeros(self.dim());
                for (lw, u) in log_weights.iter().zip(models) {
                    acc.axpy(lw.exp(), u.coords(), 1.0);
                }
                Ok(ModelVector::from_dvector(acc))
            }
            (PosteriorInner::Gaussian(s), _) => {
                let chol = Cholesky::new(s.precision.clone())
                    .ok_or_else(|| Error::DegeneratePosterior("precision is not positive definite".into()))?;
                Ok(ModelVector::from_dvector(chol.solve(&s.shift)))
            }
            _ => Err(Error::Unsupported("closed-form mean of a truncated posterior".into())),
        }
    }

    /// Bayes update with one round of feedback.
    pub fn update(&mut self, obs: &RoundRecord, inst: &Instance) -> Result<()> {
        if obs.feature.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: obs.feature.len(),
            });
        }
        let r2 = inst.noise * inst.noise;
        let mut scalars: Vec<(DVector<f64>, f64, f64)> = Vec::new();
        match (inst.feedback, &obs.aux) {
            (Feedback::Bandit, None) => {
                let n2 = obs.feature.norm_squared();
                if n2 == 0.0 {
                    // A zero row carries no information about the model.
                    self.observations += 1;
                    return Ok(());
                }
                scalars.push((obs.feature.clone(), obs.reward, r2 * n2));
            }
            (Feedback::SemiBandit, Some(aux)) => {
                for &(j, v) in aux {
                    if j >= self.dim() {
                        return Err(Error::InvalidInput(format!("aux coordinate {j} out of range")));
                    }
                    let mut e = DVector::zeros(self.dim());
                    e[j] = 1.0;
                    scalars.push((e, v, r2));
                }
            }
            (Feedback::Bandit, Some(_)) => {
                return Err(Error::InvalidInput("auxiliary feedback under bandit feedback".into()))
            }
            (Feedback::SemiBandit, None) => {
                return Err(Error::InvalidInput(
                    "missing auxiliary feedback under semi-bandit feedback".into(),
                ))
            }
        }

        match (&mut self.inner, &self.prior) {
            (PosteriorInner::Discrete { log_weights }, Prior::Discrete { models, .. }) => {
                let mut next = log_weights.clone();
                for (f, y, var) in &scalars {
                    for (lw, u) in next.iter_mut().zip(models) {
                        let resid = y - f.dot(u.coords());
                        *lw += if *var > 0.0 {
                            -0.5 * resid * resid / var
                        } else if resid.abs() <= EXACT_MATCH_TOL * (1.0 + y.abs()) {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                }
                normalize(&mut next)?;
                *log_weights = next;
            }
            (PosteriorInner::Gaussian(stats) | PosteriorInner::Truncated(stats), _) => {
                if r2 == 0.0 {
                    return Err(Error::DegeneratePosterior(
                        "noise-free observation under a continuous prior".into(),
                    ));
                }
                for (f, y, var) in &scalars {
                    stats.absorb(f, *y, *var);
                }
            }
            _ => unreachable!("posterior representation always matches its prior"),
        }
        self.observations += 1;
        Ok(())
    }

    pub fn updated(&self, obs: &RoundRecord, inst: &Instance) -> Result<Self> {
        let mut next = self.clone();
        next.update(obs, inst)?;
        Ok(next)
    }

    /// Unnormalized log posterior density (continuous priors).
    pub fn log_density(&self, u: &DVector<f64>) -> Result<f64> {
        match &self.inner {
            PosteriorInner::Gaussian(s) => Ok(-0.5 * s.quad(u)),
            PosteriorInner::Truncated(s) => Ok(if self.prior.contains(u) {
                -0.5 * s.quad(u)
            } else {
                f64::NEG_INFINITY
            }),
            PosteriorInner::Discrete { .. } => Err(Error::Unsupported("density of a discrete posterior".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelVector> {
        self.sample_traced(rng).map(|(u, _)| u)
    }

    /// Posterior draw plus the route that produced it.
    pub fn sample_traced<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(ModelVector, SampleRoute)> {
        match (&self.inner, &self.prior) {
            (PosteriorInner::Discrete { log_weights }, Prior::Discrete { models, .. }) => {
                let k = categorical(log_weights.iter().map(|l| l.exp()), rng);
                Ok((models[k].clone(), SampleRoute::Exact))
            }
            (PosteriorInner::Gaussian(s), _) => {
                let chol = Cholesky::new(s.precision.clone())
                    .ok_or_else(|| Error::DegeneratePosterior("precision is not positive definite".into()))?;
                Ok((
                    ModelVector::from_dvector(gaussian_draw(&chol, &s.shift, rng)),
                    SampleRoute::Exact,
                ))
            }
            (PosteriorInner::Truncated(s), prior) => {
                if self.observations == 0 {
                    return Ok((prior.sample(rng), SampleRoute::Exact));
                }
                self.sample_truncated(s, rng)
            }
            _ => unreachable!("posterior representation always matches its prior"),
        }
    }

    fn sample_truncated<R: Rng + ?Sized>(&self, s: &GaussianStats, rng: &mut R) -> Result<(ModelVector, SampleRoute)> {
        let d = self.dim();
        let proper = Cholesky::new(s.precision.clone()).filter(|c| {
            let diag = c.l_dirty().diagonal();
            diag.min() > 1e-12 * (1.0 + diag.max())
        });
        match proper {
            Some(chol) => {
                for _ in 0..MAX_REJECT {
                    let u = gaussian_draw(&chol, &s.shift, rng);
                    if self.prior.contains(&u) {
                        return Ok((ModelVector::from_dvector(u), SampleRoute::GaussianRejection));
                    }
                }
            }
            None => {
                // Improper likelihood in some direction: propose from the
                // prior and accept with the likelihood ratio against its
                // global maximum, exp(-(q(u) - q_min)/2).
                let q_min = -pseudo_quadratic_min(s);
                for _ in 0..MAX_REJECT {
                    let u = self.prior.sample(rng).into_inner();
                    let log_acc = -0.5 * (s.quad(&u) - q_min);
                    if rng.random::<f64>().ln() < log_acc.min(0.0) {
                        return Ok((ModelVector::from_dvector(u), SampleRoute::LikelihoodRejection));
                    }
                }
            }
        }
        if d > FALLBACK_MAX_DIM {
            return Err(Error::Sampling {
                attempts: MAX_REJECT,
                accepted: 0,
                detail: format!("rejection underflow in dimension {d} (grid fallback supports d ≤ {FALLBACK_MAX_DIM})"),
            });
        }
        let grid = self.posterior_grid(FALLBACK_GRID)?;
        if grid.is_empty() {
            return Err(Error::Sampling {
                attempts: MAX_REJECT,
                accepted: 0,
                detail: "fallback grid has no point inside the support".into(),
            });
        }
        let logs: Vec<f64> = grid.iter().map(|(_, l)| *l).collect();
        let lse = log_sum_exp(&logs);
        let k = categorical(logs.iter().map(|l| (l - lse).exp()), rng);
        Ok((grid[k].0.clone(), SampleRoute::GridFallback))
    }

    /// Midpoint grid over the posterior's effective box with unnormalized
    /// log-weights; points outside the support are dropped.
    pub fn posterior_grid(&self, per_dim: usize) -> Result<Vec<(ModelVector, f64)>> {
        let (lo, hi) = match (&self.inner, self.prior.bounding_box()) {
            (_, Some(bbox)) => bbox,
            (PosteriorInner::Gaussian(s), None) => {
                let cov = s
                    .precision
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::DegeneratePosterior("singular precision".into()))?;
                let mean = self.mean()?;
                let lo = (0..self.dim())
                    .map(|k| mean.as_slice()[k] - 6.0 * cov[(k, k)].sqrt())
                    .collect();
                let hi = (0..self.dim())
                    .map(|k| mean.as_slice()[k] + 6.0 * cov[(k, k)].sqrt())
                    .collect();
                (lo, hi)
            }
            _ => return Err(Error::Unsupported("grid over a discrete posterior".into())),
        };
        let d = lo.len();
        let total = (per_dim as f64).powi(d as i32);
        if total > 1e7 {
            return Err(Error::Unsupported(format!("{per_dim}^{d} grid points")));
        }
        let mut out = Vec::with_capacity(total as usize);
        let mut idx = vec![0usize; d];
        loop {
            let u = DVector::from_fn(d, |k, _| {
                lo[k] + (hi[k] - lo[k]) * (idx[k] as f64 + 0.5) / per_dim as f64
            });
            let l = self.log_density(&u)?;
            if l > f64::NEG_INFINITY {
                out.push((ModelVector::from_dvector(u), l));
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] < per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        Ok(out)
    }

    /// `P_t(Q(x_pub, u_t) = m)` for every message of the map: exact for
    /// discrete posteriors, grid quadrature (`per_dim` points per axis)
    /// otherwise.
    pub fn message_distribution(
        &self,
        smap: &SemanticMap,
        x_pub: usize,
        quadrature: Option<usize>,
    ) -> Result<MessageDistribution> {
        let messages = smap.message_set(self.dim())?;
        let mut probs = vec![0.0; messages.len()];
        let index_of = |m: &Message| messages.iter().position(|k| k == m);
        match (&self.inner, &self.prior) {
            (PosteriorInner::Discrete { log_weights }, Prior::Discrete { models, .. }) => {
                for (lw, u) in log_weights.iter().zip(models) {
                    let m = smap.apply(x_pub, u)?;
                    let k = index_of(&m).ok_or(Error::InvalidMessage(m))?;
                    probs[k] += lw.exp();
                }
                Ok(MessageDistribution {
                    entries: messages.into_iter().zip(probs).collect(),
                    approximate: false,
                    unmapped_mass: 0.0,
                })
            }
            _ => {
                let per_dim = quadrature.ok_or_else(|| {
                    Error::Unsupported("message distribution of a continuous posterior needs a quadrature grid".into())
                })?;
                let grid = self.posterior_grid(per_dim)?;
                let logs: Vec<f64> = grid.iter().map(|(_, l)| *l).collect();
                let lse = log_sum_exp(&logs);
                let mut unmapped = 0.0;
                for (u, l) in &grid {
                    let w = (l - lse).exp();
                    match smap.apply(x_pub, u) {
                        Ok(m) => {
                            let k = index_of(&m).ok_or(Error::InvalidMessage(m))?;
                            probs[k] += w;
                        }
                        Err(Error::OutOfDomain(_)) => unmapped += w,
                        Err(e) => return Err(e),
                    }
                }
                Ok(MessageDistribution {
                    entries: messages.into_iter().zip(probs).collect(),
                    approximate: true,
                    unmapped_mass: unmapped,
                })
            }
        }
    }
}

/// `min_u (uᵀΛu − 2bᵀu) = −bᵀΛ⁺b`; returns `bᵀΛ⁺b`.
fn pseudo_quadratic_min(s: &GaussianStats) -> f64 {
    let eig = s.precision.clone().symmetric_eigen();
    let cutoff = 1e-12 * (1.0 + eig.eigenvalues.amax());
    let proj = eig.eigenvectors.transpose() * &s.shift;
    proj.iter()
        .zip(eig.eigenvalues.iter())
        .filter(|(_, &l)| l > cutoff)
        .map(|(p, l)| p * p / l)
        .sum()
}

/// Draw from `N(Λ⁻¹b, Λ⁻¹)` given the Cholesky factor of `Λ`.
fn gaussian_draw<R: Rng + ?Sized>(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    shift: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(shift);
    let z = standard_normal(shift.len(), rng);
    // L Lᵀ = Λ, so Lᵀ w = z gives Cov(w) = (L Lᵀ)⁻¹.
    let w = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("cholesky factor has a positive diagonal");
    mean + w
}

fn normalize(log_weights: &mut [f64]) -> Result<()> {
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY || lse.is_nan() {
        return Err(Error::DegeneratePosterior("every model has zero likelihood".into()));
    }
    for l in log_weights.iter_mut() {
        *l -= lse;
    }
    Ok(())
}
