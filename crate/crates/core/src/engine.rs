//! The game-protocol simulator: warm start, main stage, agent behaviour and
//! per-round instrumentation.
//!
//! Every random draw is addressed by `(seed, replicate, round, purpose)`, so
//! a replicate's log does not depend on scheduling, worker count, or on which
//! other quantities happen to be instrumented.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{realize_outcome, validate_instance, AgentType, Instance, ModelVector, RoundRecord};
use crate::error::{Error, Result};
use crate::policies::{generate_warmup, PolicyState, Proposal, TypeOracle, WarmstartPlan};
use crate::priors::{categorical, PosteriorState, Prior};
use crate::rng::{Purpose, Streams};
use crate::semantics::{Message, SemanticMap};
use crate::spectral::{GramAccumulator, SpectralSnapshot};

/// Inner simulations per model used by the best-response oracle.
pub const ORACLE_INNER_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Fps,
    Fls,
    Ucb { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TypeSource {
    Homogeneous {
        x0: AgentType,
    },
    IidSampler {
        types: Vec<AgentType>,
        weights: Vec<f64>,
    },
    /// Round `t` gets `sequence[t - 1]`.
    Explicit {
        sequence: Vec<AgentType>,
    },
}

impl TypeSource {
    /// Every type the source can produce, indexed by `type_id`.
    pub fn support(&self) -> &[AgentType] {
        match self {
            TypeSource::Homogeneous { x0 } => std::slice::from_ref(x0),
            TypeSource::IidSampler { types, .. } => types,
            TypeSource::Explicit { sequence } => sequence,
        }
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        match self {
            TypeSource::IidSampler { types, weights } => {
                if types.is_empty() || types.len() != weights.len() {
                    return Err(Error::InvalidInput("iid type sampler needs one weight per type".into()));
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::InvalidInput(
                        "type weights must be non-negative with positive sum".into(),
                    ));
                }
            }
            TypeSource::Explicit { sequence } if sequence.len() < horizon => {
                return Err(Error::InvalidInput(format!(
                    "explicit type sequence has {} entries for horizon {horizon}",
                    sequence.len()
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

impl TypeOracle for TypeSource {
    fn agent_at(&self, t: usize, streams: &Streams) -> Result<(usize, &AgentType)> {
        match self {
            TypeSource::Homogeneous { x0 } => Ok((0, x0)),
            TypeSource::IidSampler { types, weights } => {
                let mut rng = streams.rng(t as u64, Purpose::TypeDraw);
                let k = categorical(weights.iter().copied(), &mut rng);
                Ok((k, &types[k]))
            }
            TypeSource::Explicit { sequence } => sequence
                .get(t - 1)
                .map(|x| (t - 1, x))
                .ok_or_else(|| Error::InvalidInput(format!("no explicit type for round {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentModel {
    /// Plays `menu(x_t, M_t)`.
    Compliant,
    /// Plays the arm maximizing its posterior-expected reward given the
    /// message and round. Discrete priors only.
    OracleBestResponse {
        #[serde(default = "default_inner_draws")]
        inner_draws: usize,
    },
}

fn default_inner_draws() -> usize {
    ORACLE_INNER_DRAWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: Instance,
    pub prior: Prior,
    pub smap: SemanticMap,
    pub policy: PolicyKind,
    pub warmup: WarmstartPlan,
    pub types: TypeSource,
    pub agent_model: AgentModel,
    pub seed: u64,
    pub replicates: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let inst = &self.instance;
        inst.validate()?;
        self.prior.validate()?;
        if self.prior.dim() != inst.d {
            return Err(Error::DimensionMismatch {
                expected: inst.d,
                got: self.prior.dim(),
            });
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput("replicates must be at least 1".into()));
        }
        self.types.validate(inst.horizon)?;
        let support = self.types.support();
        if support.is_empty() {
            return Err(Error::InvalidInput("type source is empty".into()));
        }
        let models: &[ModelVector] = match &self.prior {
            Prior::Discrete { models, .. } => models,
            _ => &[],
        };
        let report = validate_instance(inst, support, models);
        if !report.is_valid() {
            return Err(Error::InvalidInput(format!(
                "instance violations: {:?}",
                report.violations
            )));
        }
        let t0 = self.warmup.len(inst.k, &support[0])?;
        if t0 != inst.warm_start {
            return Err(Error::InvalidInput(format!(
                "warm-up plan produces {t0} rounds but the instance declares warm_start = {}",
                inst.warm_start
            )));
        }
        match (&self.policy, &self.smap) {
            (PolicyKind::Fls, SemanticMap::HypercubeCover(c)) if c.dim() != inst.d => {
                return Err(Error::DimensionMismatch {
                    expected: inst.d,
                    got: c.dim(),
                })
            }
            (PolicyKind::Fls, SemanticMap::HypercubeCover(_)) => {}
            (PolicyKind::Fls, _) => {
                return Err(Error::InvalidInput(
                    "FLS requires a hypercube_cover semantic map".into(),
                ))
            }
            (PolicyKind::Ucb { .. }, SemanticMap::ArgmaxDirect { .. }) => {
                let k_armed =
                    inst.d == inst.k && support.iter().all(|x| x.rows() == AgentType::identity(inst.k).rows());
                if !k_armed {
                    return Err(Error::InvalidInput(
                        "UCB requires the K-armed embedding (identity types)".into(),
                    ));
                }
            }
            (PolicyKind::Ucb { .. }, _) => {
                return Err(Error::InvalidInput("UCB requires an argmax_direct semantic map".into()))
            }
            (PolicyKind::Fps, _) => {}
        }
        if let SemanticMap::HypercubeCover(c) = &self.smap {
            c.validate()?;
        }
        if matches!(self.agent_model, AgentModel::OracleBestResponse { .. }) && !self.prior.is_discrete() {
            return Err(Error::Unsupported("best-response agents need a discrete prior".into()));
        }
        Ok(())
    }

    pub fn initial_policy(&self) -> Result<PolicyState> {
        match &self.policy {
            PolicyKind::Fps => Ok(PolicyState::fps(
                PosteriorState::new(self.prior.clone())?,
                self.smap.clone(),
            )),
            PolicyKind::Fls => match &self.smap {
                SemanticMap::HypercubeCover(c) => PolicyState::fls(self.instance.d, c.clone()),
                _ => Err(Error::InvalidInput(
                    "FLS requires a hypercube_cover semantic map".into(),
                )),
            },
            PolicyKind::Ucb { rho } => PolicyState::ucb(*rho, self.instance.k),
        }
    }

    /// Rounds between spectral snapshots.
    pub fn snapshot_every(&self) -> usize {
        (self.instance.horizon / 100).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Main,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Main => "main",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRound {
    pub stage: Stage,
    pub record: RoundRecord,
    /// `x_{A_t}·u*`.
    pub expected_reward: f64,
    /// `max_i x_{t,i}·u*`.
    pub best_reward: f64,
    pub regret: f64,
    /// FPS: the posterior sample; FLS: the unclamped estimate.
    pub sampled_model: Option<ModelVector>,
    pub clamped: bool,
    /// The agent played `menu(x_t, M_t)`.
    pub compliant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub replicate: usize,
    pub u_star: ModelVector,
    pub rounds: Vec<LoggedRound>,
    pub snapshots: Vec<SpectralSnapshot>,
}

impl RunLog {
    pub fn warmup(&self) -> impl Iterator<Item = &LoggedRound> {
        self.rounds.iter().filter(|r| r.stage == Stage::Warmup)
    }

    pub fn main_stage(&self) -> impl Iterator<Item = &LoggedRound> {
        self.rounds.iter().filter(|r| r.stage == Stage::Main)
    }

    pub fn snapshot_at(&self, t: usize) -> Option<&SpectralSnapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }
}

/// One replicate in progress. Rounds are 1-based; `round()` is the number
/// of completed rounds.
pub struct Episode<'a> {
    config: &'a ExperimentConfig,
    streams: Streams,
    policy: PolicyState,
    gram: GramAccumulator,
    log: RunLog,
    every: usize,
    /// Inner simulations replay the principal with compliant agents.
    compliant_only: bool,
}

impl<'a> Episode<'a> {
    /// Draws `u*` and runs the warm start.
    pub fn start(config: &'a ExperimentConfig, replicate: usize) -> Result<Self> {
        Self::start_with(config, Streams::new(config.seed, replicate as u64), None, replicate)
    }

    /// Like [`Episode::start`] with explicit streams and optionally a fixed
    /// `u*`.
    pub fn start_with(
        config: &'a ExperimentConfig,
        streams: Streams,
        u_star: Option<ModelVector>,
        replicate: usize,
    ) -> Result<Self> {
        let u_star = match u_star {
            Some(u) => u,
            None => config.prior.sample(&mut streams.rng(0, Purpose::Model)),
        };
        let mut ep = Episode {
            config,
            streams,
            policy: config.initial_policy()?,
            gram: GramAccumulator::new(config.instance.d),
            log: RunLog {
                replicate,
                u_star,
                rounds: Vec::with_capacity(config.instance.horizon),
                snapshots: Vec::new(),
            },
            every: config.snapshot_every(),
            compliant_only: false,
        };
        let warm = generate_warmup(
            &config.warmup,
            &config.instance,
            &config.types,
            &ep.log.u_star,
            &streams,
        )?;
        for rec in warm.records {
            let x = config.types.support()[rec.type_id].clone();
            ep.absorb(Stage::Warmup, rec, &x, None, false, true)?;
        }
        Ok(ep)
    }

    pub fn round(&self) -> usize {
        self.log.rounds.len()
    }

    pub fn u_star(&self) -> &ModelVector {
        &self.log.u_star
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    /// Rounds played so far.
    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.round() >= self.config.instance.horizon
    }

    /// Type arriving in the next round.
    pub fn next_agent(&self) -> Result<(usize, &'a AgentType)> {
        self.config.types.agent_at(self.round() + 1, &self.streams)
    }

    /// The policy's proposal for the next round.
    pub fn propose(&self, x_pub: usize) -> Result<Proposal> {
        let t = self.round() + 1;
        let mut rng = self.streams.rng(t as u64, Purpose::PolicySample);
        self.policy.propose(t, x_pub, &mut rng)
    }

    /// `P(M_t = m | history, pub)` for the next round: exact for FPS over a
    /// discrete posterior, an indicator for deterministic policies.
    pub fn message_probability(&self, x_pub: usize, m: &Message) -> Result<f64> {
        match &self.policy {
            PolicyState::Fps { posterior, smap } => {
                let Prior::Discrete { models, .. } = posterior.prior() else {
                    return Err(Error::Unsupported(
                        "exact message probabilities need a discrete prior".into(),
                    ));
                };
                let w = posterior.weights().expect("discrete posterior has weights");
                let mut p = 0.0;
                for (u, wk) in models.iter().zip(&w) {
                    if smap.apply(x_pub, u)? == *m {
                        p += wk;
                    }
                }
                Ok(p)
            }
            _ => Ok(f64::from(u8::from(self.propose(x_pub)?.message == *m))),
        }
    }

    /// Plays one main-stage round.
    pub fn step(&mut self) -> Result<()> {
        let t = self.round() + 1;
        if t > self.config.instance.horizon {
            return Err(Error::InvalidInput("episode already finished".into()));
        }
        let (type_id, x) = self.next_agent()?;
        let proposal = self.propose(x.public_id())?;
        let menu_arm = self.config.smap.menu(x, &proposal.message)?;
        let arm = match self.config.agent_model {
            AgentModel::OracleBestResponse { inner_draws } if !self.compliant_only => {
                self.best_response(x, &proposal.message, menu_arm, inner_draws)?
            }
            _ => menu_arm,
        };
        let mut rng = self.streams.rng(t as u64, Purpose::Noise);
        let outcome = realize_outcome(&self.log.u_star, x, arm, &self.config.instance, &mut rng)?;
        let mut rec = RoundRecord::new(t, type_id, x, arm, outcome)?;
        rec.message = Some(proposal.message);
        self.absorb(Stage::Main, rec, x, proposal.model, proposal.clamped, arm == menu_arm)
    }

    /// Completes rounds until `round() == t`.
    pub fn run_to(&mut self, t: usize) -> Result<()> {
        while self.round() < t {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunLog> {
        self.run_to(self.config.instance.horizon)?;
        Ok(self.log)
    }

    fn absorb(
        &mut self,
        stage: Stage,
        rec: RoundRecord,
        x: &AgentType,
        sampled_model: Option<ModelVector>,
        clamped: bool,
        compliant: bool,
    ) -> Result<()> {
        let u = self.log.u_star.coords();
        let expected_reward = rec.feature.dot(u);
        let best_reward = x.rows().iter().map(|r| r.dot(u)).fold(f64::NEG_INFINITY, f64::max);
        self.policy.update(&rec, &self.config.instance)?;
        self.gram.absorb(&rec.feature)?;
        let t = rec.t;
        self.log.rounds.push(LoggedRound {
            stage,
            record: rec,
            expected_reward,
            best_reward,
            regret: best_reward - expected_reward,
            sampled_model,
            clamped,
            compliant,
        });
        let t0 = self.config.instance.warm_start;
        if (t == t0 && t0 >= 1) || t.is_multiple_of(self.every) {
            self.log.snapshots.push(self.gram.snapshot(t)?);
        }
        Ok(())
    }

    /// The agent's Bayes-optimal arm given its type and the message, with
    /// the message likelihood under each model estimated by replaying the
    /// principal (compliant agents before this round).
    fn best_response(&self, x: &AgentType, m: &Message, fallback: usize, inner: usize) -> Result<usize> {
        let Prior::Discrete { models, weights } = &self.config.prior else {
            return Err(Error::Unsupported("best-response agents need a discrete prior".into()));
        };
        let t = self.round() + 1;
        let mut mean = DVector::zeros(self.config.instance.d);
        let mut total = 0.0;
        for (k, (u, w)) in models.iter().zip(weights).enumerate() {
            let mut like = 0.0;
            for r in 0..inner {
                let streams = self.streams.nested(t as u64, k as u64, r as u64);
                let mut sim = Episode::start_with(self.config, streams, Some(u.clone()), self.log.replicate)?;
                sim.compliant_only = true;
                sim.run_to(t - 1)?;
                like += sim.message_probability(x.public_id(), m)?;
            }
            let post = w * like / inner as f64;
            mean.axpy(post, u.coords(), 1.0);
            total += post;
        }
        if total <= 0.0 {
            return Ok(fallback);
        }
        x.best_arm(&(mean / total))
    }
}

pub fn run_episode(config: &ExperimentConfig, replicate: usize) -> Result<RunLog> {
    config.validate()?;
    Episode::start(config, replicate)?.finish()
}

/// Maps `f` over `0..n` on at most `workers` threads (the global pool when
/// `None`), keeping index order.
pub fn par_indexed<T, F>(n: usize, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match workers {
        None => (0..n).into_par_iter().map(&f).collect(),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(&f).collect())
        }
    }
}

/// All replicates, in replicate order regardless of scheduling.
pub fn run_replicates(config: &ExperimentConfig, workers: Option<usize>) -> Result<Vec<RunLog>> {
    config.validate()?;
    par_indexed(config.replicates, workers, |r| Episode::start(config, r)?.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSeries {
    pub per_round: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RegretSeries {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Pointwise mean over replicates (Bayesian regret).
    pub fn mean(series: &[RegretSeries]) -> Result<RegretSeries> {
        let Some(first) = series.first() else {
            return Err(Error::InvalidInput("no regret series to average".into()));
        };
        let len = first.per_round.len();
        if series.iter().any(|s| s.per_round.len() != len) {
            return Err(Error::InvalidInput("regret series lengths differ".into()));
        }
        let n = series.len() as f64;
        let per_round: Vec<f64> = (0..len)
            .map(|t| series.iter().map(|s| s.per_round[t]).sum::<f64>() / n)
            .collect();
        Ok(RegretSeries::from_per_round(per_round))
    }

    fn from_per_round(per_round: Vec<f64>) -> Self {
        let cumulative = per_round
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        RegretSeries { per_round, cumulative }
    }
}

pub fn regret(log: &RunLog) -> RegretSeries {
    RegretSeries::from_per_round(log.rounds.iter().map(|r| r.regret).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Feedback;
    use crate::semantics::HypercubeCover;

    fn mv(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec())
    }

    fn two_model(horizon: usize, warmup: WarmstartPlan, t0: usize) -> ExperimentConfig {
        ExperimentConfig {
            instance: Instance {
                d: 2,
                k: 2,
                c_u: 1.0,
                c_x: 1.0,
                sparsity: 1,
                noise: 1.0,
                horizon,
                warm_start: t0,
                feedback: Feedback::Bandit,
            },
            prior: Prior::Discrete {
                models: vec![mv(&[0.9, 0.1]), mv(&[0.2, 0.8])],
                weights: vec![0.5, 0.5],
            },
            smap: SemanticMap::argmax_direct(&[AgentType::identity(2)]).unwrap(),
            policy: PolicyKind::Fps,
            warmup,
            types: TypeSource::Homogeneous {
                x0: AgentType::identity(2),
            },
            agent_model: AgentModel::Compliant,
            seed: 42,
            replicates: 4,
        }
    }

    fn empty_plan() -> WarmstartPlan {
        WarmstartPlan::FixedSequence { arms: vec![] }
    }

    #[test]
    fn episodes_are_deterministic_and_compliant() {
        let cfg = two_model(50, WarmstartPlan::per_arm(2), 4);
        let a = run_episode(&cfg, 3).unwrap();
        assert_eq!(a, run_episode(&cfg, 3).unwrap());
        assert_ne!(a, run_episode(&cfg, 4).unwrap());
        assert_eq!(a.rounds.len(), 50);
        assert_eq!(a.warmup().count(), 4);
        let x = AgentType::identity(2);
        for r in a.main_stage() {
            let m = r.record.message.as_ref().unwrap();
            assert_eq!(r.record.arm, cfg.smap.menu(&x, m).unwrap());
            assert!(r.compliant);
        }
    }

    #[test]
    fn full_warm_start_never_queries_the_policy() {
        let cfg = two_model(6, WarmstartPlan::per_arm(3), 6);
        let log = run_episode(&cfg, 0).unwrap();
        assert_eq!(log.rounds.len(), 6);
        assert!(log
            .rounds
            .iter()
            .all(|r| r.stage == Stage::Warmup && r.record.message.is_none()));
    }

    #[test]
    fn replicate_order_is_schedule_independent() {
        let mut cfg = two_model(30, WarmstartPlan::per_arm(1), 2);
        cfg.replicates = 6;
        let one = run_replicates(&cfg, Some(1)).unwrap();
        let eight = run_replicates(&cfg, Some(8)).unwrap();
        assert_eq!(one, eight);
        assert_eq!(one[0], run_episode(&cfg, 0).unwrap());
        cfg.replicates = 1;
        assert_eq!(run_replicates(&cfg, None).unwrap(), vec![run_episode(&cfg, 0).unwrap()]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = two_model(10, WarmstartPlan::per_arm(2), 3);
        assert!(cfg.validate().is_err(), "warm-up length mismatch");
        cfg.instance.warm_start = 4;
        cfg.validate().unwrap();
        cfg.policy = PolicyKind::Fls;
        assert!(cfg.validate().is_err());
        cfg.policy = PolicyKind::Ucb { rho: 1.0 };
        cfg.validate().unwrap();
        cfg.agent_model = AgentModel::OracleBestResponse { inner_draws: 10 };
        cfg.validate().unwrap();
        cfg.prior = Prior::UniformBox {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn regret_examples() {
        // point mass: FPS always recommends the best arm
        let mut cfg = two_model(20, empty_plan(), 0);
        cfg.prior = Prior::point_mass(mv(&[0.2, 0.8]));
        let r = regret(&run_episode(&cfg, 0).unwrap());
        assert_eq!(r.total(), 0.0);

        // worst arm every round
        let mut cfg = two_model(10, WarmstartPlan::FixedSequence { arms: vec![0; 10] }, 10);
        cfg.prior = Prior::point_mass(mv(&[0.2, 0.8]));
        let r = regret(&run_episode(&cfg, 0).unwrap());
        for (t, c) in r.cumulative.iter().enumerate() {
            assert!((c - (t + 1) as f64 * 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn fps_beats_uniform_exploration() {
        let t = 500;
        let mut fps = two_model(t, empty_plan(), 0);
        fps.replicates = 200;
        let mut uniform = two_model(t, WarmstartPlan::NearUniform { epsilon: 1.0, t0: t }, t);
        uniform.replicates = 200;
        let mean = |cfg: &ExperimentConfig| {
            let logs = run_replicates(cfg, None).unwrap();
            RegretSeries::mean(&logs.iter().map(regret).collect::<Vec<_>>())
                .unwrap()
                .total()
        };
        let (a, b) = (mean(&fps), mean(&uniform));
        assert!(a < 0.9 * b, "fps {a} vs uniform {b}");
    }

    #[test]
    fn first_round_messages_match_the_prior() {
        let mut cfg = two_model(1, empty_plan(), 0);
        cfg.replicates = 10_000;
        let logs = run_replicates(&cfg, None).unwrap();
        let n = logs.len() as f64;
        let hits = logs
            .iter()
            .filter(|l| l.rounds[0].record.message == Some(Message::Arm(0)))
            .count() as f64;
        assert!((hits / n - 0.5).abs() <= 3.0 * (0.25 / n).sqrt());
        // and the M_t ~ Q(u*) law at t = 1
        let star = logs
            .iter()
            .filter(|l| cfg.smap.apply(0, &l.u_star).unwrap() == Message::Arm(0))
            .count() as f64;
        assert!((hits - star).abs() / n <= 3.0 * (2.0 * 0.25 / n).sqrt());
    }

    #[test]
    fn realized_rewards_are_unbiased() {
        let mut cfg = two_model(5, WarmstartPlan::per_arm(1), 2);
        cfg.replicates = 10_000;
        let logs = run_replicates(&cfg, None).unwrap();
        let mut w = crate::stats::Welford::new();
        for l in &logs {
            w.push(l.rounds.iter().map(|r| r.record.reward - r.expected_reward).sum());
        }
        assert!(w.mean.abs() <= 3.0 * w.std_error(), "{} ± {}", w.mean, w.std_error());
    }

    #[test]
    fn spectral_snapshots_are_monotone() {
        let cfg = ExperimentConfig {
            types: TypeSource::IidSampler {
                types: vec![
                    AgentType::new(vec![vec![1.0, 0.0], vec![0.6, 0.8]], 0).unwrap(),
                    AgentType::new(vec![vec![0.0, 1.0], vec![-0.8, 0.6]], 0).unwrap(),
                ],
                weights: vec![0.5, 0.5],
            },
            prior: Prior::Gaussian {
                mean: vec![0.0, 0.0],
                cov: vec![vec![0.2, 0.0], vec![0.0, 0.2]],
            },
            smap: SemanticMap::voronoi(vec![mv(&[1.0, 0.0]), mv(&[0.0, 1.0]), mv(&[-1.0, -1.0])]).unwrap(),
            ..two_model(300, WarmstartPlan::NearUniform { epsilon: 0.5, t0: 20 }, 20)
        };
        let mut cfg = cfg;
        cfg.instance.c_u = 10.0;
        cfg.instance.sparsity = 2;
        let log = run_episode(&cfg, 1).unwrap();
        assert!(log.snapshot_at(20).is_some());
        assert_eq!(log.snapshots[0].t, 3);
        assert_eq!(log.snapshots.len(), 1 + 100);
        for w in log.snapshots.windows(2) {
            assert!(w[1].lambda_min >= w[0].lambda_min - 1e-9);
            assert!(w[1].t > w[0].t);
        }
    }

    #[test]
    fn fls_and_ucb_episodes_run() {
        let mut cfg = two_model(40, WarmstartPlan::per_arm(2), 4);
        cfg.policy = PolicyKind::Ucb { rho: 1.0 };
        let log = run_episode(&cfg, 0).unwrap();
        assert!(log.main_stage().all(|r| r.sampled_model.is_none()));

        cfg.policy = PolicyKind::Fls;
        cfg.smap = SemanticMap::HypercubeCover(HypercubeCover::new(vec![0.0, 0.0], 0.125, vec![4, 4]).unwrap());
        let log = run_episode(&cfg, 0).unwrap();
        assert!(log.main_stage().all(|r| r.sampled_model.is_some()));
    }

    #[test]
    fn ucb_without_warm_start_fails_cleanly() {
        let mut cfg = two_model(5, empty_plan(), 0);
        cfg.policy = PolicyKind::Ucb { rho: 1.0 };
        assert!(matches!(run_episode(&cfg, 0), Err(Error::UninitializedArm(0))));
    }

    #[test]
    fn best_response_follows_informative_recommendations() {
        // After a round-robin warm start the two-model recommendation is
        // strongly BIC, so a best-responding agent follows it.
        let mut cfg = two_model(6, WarmstartPlan::per_arm(2), 4);
        cfg.instance.noise = 0.3;
        cfg.agent_model = AgentModel::OracleBestResponse { inner_draws: 20 };
        let log = run_episode(&cfg, 0).unwrap();
        assert!(log.main_stage().all(|r| r.compliant));

        // With a point mass the oracle and the menu agree trivially.
        cfg.prior = Prior::point_mass(mv(&[0.9, 0.1]));
        let log = run_episode(&cfg, 1).unwrap();
        assert!(log.main_stage().all(|r| r.compliant && r.record.arm == 0));
    }

    #[test]
    fn explicit_types_follow_the_sequence() {
        let a = AgentType::identity(2);
        let b = AgentType::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 1).unwrap();
        let mut cfg = two_model(3, empty_plan(), 0);
        cfg.smap = SemanticMap::argmax_direct(&[a.clone(), b.clone()]).unwrap();
        cfg.types = TypeSource::Explicit {
            sequence: vec![a.clone(), b, a],
        };
        let log = run_episode(&cfg, 0).unwrap();
        let ids: Vec<_> = log
            .rounds
            .iter()
            .map(|r| (r.record.type_id, r.record.public_id))
            .collect();
        assert_eq!(ids, vec![(0, 0), (1, 1), (2, 0)]);
        cfg.instance.horizon = 4;
        assert!(cfg.validate().is_err());
    }
}
