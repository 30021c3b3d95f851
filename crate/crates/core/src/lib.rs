//! Simulation and verification toolkit for incentivized exploration in
//! linear contextual bandits.
//!
//! A principal recommends arms to a stream of self-interested agents. Each
//! recommendation is a *message* produced by passing a model estimate through
//! a public semantic map; agents decode it with a public menu. This crate
//! implements the game protocol, filtered posterior sampling together with
//! least-squares and UCB baselines, the spectral-diversity quantities that
//! gate incentive compatibility, and a Monte Carlo audit of Bayesian
//! incentive-compatibility (BIC) against prior-dependent thresholds.
//!
//! Module map:
//!
//! - [`domain`]: models, agent types, instances, outcomes
//! - [`spectral`]: Gram accumulation, `λ_min` and its diagonal variant
//! - [`priors`]: prior families, exact posterior updates, posterior sampling
//! - [`semantics`]: semantic maps, menus, covers, menu-consistency checks
//! - [`policies`]: FPS, FLS, UCB/Greedy and warm-start generators
//! - [`engine`]: the episode simulator and replicate runner
//! - [`audit`]: primitives, thresholds and the BIC audit

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod domain;
pub mod engine;
pub mod error;
pub mod policies;
pub mod priors;
pub mod rng;
pub mod semantics;
pub mod spectral;
pub mod stats;

pub use audit::{
    audit_bic, compute_eta, compute_thresholds, estimate_primitives, g_epsilon, AuditMode, BicAuditReport,
    EpsConvention, PrimitiveEstimates, PrimitiveMode, Scenario, ThresholdParams, Thresholds, Verdict,
};
pub use domain::{
    expected_reward, realize_outcome, validate_instance, AgentType, Feedback, Instance, ModelVector, Outcome,
    RoundRecord, ValidationReport, Violation, WarmupData,
};
pub use engine::{
    regret, run_episode, run_replicates, AgentModel, ExperimentConfig, PolicyKind, RegretSeries, RunLog, TypeSource,
};
pub use error::{Error, Result};
pub use policies::{generate_warmup, PolicyState, WarmstartPlan};
pub use priors::{PosteriorState, Prior};
pub use semantics::{Message, SemanticMap};
pub use spectral::GramAccumulator;
