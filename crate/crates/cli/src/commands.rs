//! The four subcommands. Each returns the paths it wrote plus a line for
//! stdout; `main` maps errors to exit codes.

use std::path::PathBuf;

use ixplore_core::audit::{AuditParams, PrimitiveEstimates};
use ixplore_core::engine::par_indexed;
use ixplore_core::{
    audit_bic, compute_thresholds, estimate_primitives, g_epsilon, regret, run_replicates, BicAuditReport, Error,
    GramAccumulator, PrimitiveMode, RegretSeries, Thresholds,
};
use serde::Serialize;

use crate::config::{self, Format, Loaded};
use crate::output::{json_bytes, rounds_csv, Outputs};
use crate::CliError;

/// Inputs shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    /// Value of the seed environment variable, if set.
    pub seed_env: Option<String>,
    pub workers: Option<usize>,
}

impl Options {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            ..Self::default()
        }
    }

    pub fn load(&self) -> Result<Loaded, CliError> {
        config::load(&self.config, &self.overrides, self.seed, self.seed_env.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct Completed {
    pub written: Vec<PathBuf>,
    /// One-line human summary.
    pub line: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    fn new(command: &str, loaded: &Loaded) -> Self {
        Self {
            command: command.to_string(),
            config_hash: loaded.hash.clone(),
            seed: loaded.file.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub provenance: Provenance,
    pub replicates: usize,
    pub horizon: usize,
    pub warm_start: usize,
    pub policy: String,
    pub semantic_map: String,
    pub rows: usize,
    pub mean_total_regret: f64,
    pub total_regret: Vec<f64>,
    /// Mean over replicates of the cumulative regret after each round.
    pub mean_cumulative_regret: Vec<f64>,
    pub compliance_rate: f64,
    pub clamped_rounds: usize,
}

pub fn cmd_run(opts: &Options) -> Result<Completed, CliError> {
    let loaded = opts.load()?;
    let cfg = &loaded.experiment;
    let logs = run_replicates(cfg, opts.workers)?;
    let series: Vec<RegretSeries> = logs.iter().map(regret).collect();
    let mean = RegretSeries::mean(&series)?;
    let rows: usize = logs.iter().map(|l| l.rounds.len()).sum();
    let main: Vec<_> = logs.iter().flat_map(|l| l.main_stage()).collect();
    let compliance_rate = if main.is_empty() {
        1.0
    } else {
        main.iter().filter(|r| r.compliant).count() as f64 / main.len() as f64
    };
    let summary = RunSummary {
        provenance: Provenance::new("run", &loaded),
        replicates: cfg.replicates,
        horizon: cfg.instance.horizon,
        warm_start: cfg.instance.warm_start,
        policy: policy_name(&loaded),
        semantic_map: cfg.smap.name().to_string(),
        rows,
        mean_total_regret: mean.total(),
        total_regret: series.iter().map(RegretSeries::total).collect(),
        mean_cumulative_regret: mean.cumulative.clone(),
        compliance_rate,
        clamped_rounds: main.iter().filter(|r| r.clamped).count(),
    };
    let mut out = Outputs::default();
    let formats = &loaded.file.output.formats;
    if formats.contains(&Format::Csv) {
        out.add("rounds.csv", rounds_csv(&logs)?);
    }
    if formats.contains(&Format::Json) {
        out.add("summary.json", json_bytes(&summary)?);
    }
    let written = out.commit(&loaded.file.output.dir)?;
    Ok(Completed {
        written,
        line: format!(
            "run: {} replicates x {} rounds, mean regret {:.6}",
            cfg.replicates, cfg.instance.horizon, summary.mean_total_regret
        ),
    })
}

fn policy_name(loaded: &Loaded) -> String {
    match &loaded.file.policy {
        ixplore_core::PolicyKind::Fps => "fps".into(),
        ixplore_core::PolicyKind::Fls => "fls".into(),
        ixplore_core::PolicyKind::Ucb { rho } => format!("ucb(rho={rho})"),
    }
}

/// Thresholds, or the reason they could not be computed.
fn thresholds_or_note(
    est: &PrimitiveEstimates,
    loaded: &Loaded,
) -> Result<(Option<Thresholds>, Option<String>), CliError> {
    match compute_thresholds(est, &loaded.experiment.instance, &loaded.threshold_params()) {
        Ok(t) => Ok((Some(t), None)),
        Err(e @ (Error::UndefinedThreshold(_) | Error::Unsupported(_))) => Ok((None, Some(e.to_string()))),
        Err(e) => Err(e.into()),
    }
}

fn primitives(loaded: &Loaded) -> Result<PrimitiveEstimates, Error> {
    let samples = loaded.file.audit.as_ref().map_or(100_000, |a| a.primitive_samples);
    let cfg = &loaded.experiment;
    estimate_primitives(
        &cfg.prior,
        &cfg.smap,
        cfg.types.support(),
        PrimitiveMode::Auto { samples },
        cfg.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AuditOutput {
    pub provenance: Provenance,
    pub report: BicAuditReport,
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_note: Option<String>,
}

pub fn cmd_audit(opts: &Options) -> Result<Completed, CliError> {
    let loaded = opts.load()?;
    let cfg = &loaded.experiment;
    let block = loaded
        .file
        .audit
        .as_ref()
        .ok_or_else(|| CliError::Config("missing key `audit` (required by the audit command)".into()))?;
    let (t0, horizon) = (cfg.instance.warm_start, cfg.instance.horizon);
    if block.round <= t0 || block.round > horizon {
        return Err(CliError::Config(format!(
            "audit.round = {} must lie in ({t0}, {horizon}]",
            block.round
        )));
    }
    if !(block.epsilon >= 0.0 && block.epsilon.is_finite()) {
        return Err(CliError::Config("audit.epsilon must be finite and non-negative".into()));
    }
    let params = AuditParams {
        round: block.round,
        replicates: block.replicates.unwrap_or(cfg.replicates),
        epsilon: block.epsilon,
        mode: block.mode,
    };
    let report = audit_bic(cfg, &params, opts.workers)?;
    let (thresholds, thresholds_note) = match primitives(&loaded) {
        Ok(est) => thresholds_or_note(&est, &loaded)?,
        Err(e) => (None, Some(format!("primitives unavailable: {e}"))),
    };
    let low = report.min_gap.as_ref().map(|c| c.incentive.ci_low);
    let line = format!(
        "verdict: {} (round {}, {} replicates, min gap lower bound {})",
        report.verdict,
        report.round,
        report.replicates,
        low.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    let doc = AuditOutput {
        provenance: Provenance::new("audit", &loaded),
        report,
        thresholds,
        thresholds_note,
    };
    let mut out = Outputs::default();
    out.add("audit.json", json_bytes(&doc)?);
    let written = out.commit(&loaded.file.output.dir)?;
    Ok(Completed { written, line })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct GPoint {
    pub epsilon: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PrimitivesOutput {
    pub provenance: Provenance,
    pub primitives: PrimitiveEstimates,
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_note: Option<String>,
    pub g_epsilon: Vec<GPoint>,
}

pub fn cmd_primitives(opts: &Options) -> Result<Completed, CliError> {
    let loaded = opts.load()?;
    let est = primitives(&loaded)?;
    let (thresholds, thresholds_note) = thresholds_or_note(&est, &loaded)?;
    let types = loaded.experiment.types.support();
    let g = loaded
        .threshold_params()
        .eps_grid
        .iter()
        .map(|&epsilon| g_epsilon(&est, types, epsilon).map(|g| GPoint { epsilon, g }))
        .collect::<Result<Vec<_>, _>>()?;
    let line = match (&thresholds, &thresholds_note) {
        (Some(t), _) => format!(
            "primitives: delta_ts {} eps_ts {} n_ts {}",
            t.delta_ts,
            t.eps_ts.map_or("none".into(), |e| e.to_string()),
            t.n_ts_ceil.map_or("none".into(), |n| n.to_string())
        ),
        (None, note) => format!(
            "primitives: delta_ts {}; thresholds undefined ({})",
            est.delta_ts_all,
            note.as_deref().unwrap_or("")
        ),
    };
    let doc = PrimitivesOutput {
        provenance: Provenance::new("primitives", &loaded),
        primitives: est,
        thresholds,
        thresholds_note,
        g_epsilon: g,
    };
    let mut out = Outputs::default();
    out.add("primitives.json", json_bytes(&doc)?);
    let written = out.commit(&loaded.file.output.dir)?;
    Ok(Completed { written, line })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct WarmupSpectrum {
    pub replicate: usize,
    pub lambda_min: f64,
    pub lambda_diag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DiversityOutput {
    pub provenance: Provenance,
    pub warm_start: usize,
    pub replicates: Vec<WarmupSpectrum>,
    pub min_lambda_min: f64,
    pub mean_lambda_min: f64,
    pub min_lambda_diag: f64,
    pub mean_lambda_diag: f64,
}

/// Spectrum of the warm-up Gram matrix for every replicate; no main stage
/// is played.
pub fn cmd_diversity(opts: &Options) -> Result<Completed, CliError> {
    let loaded = opts.load()?;
    let cfg = &loaded.experiment;
    let spectra = par_indexed(cfg.replicates, opts.workers, |r| {
        let ep = ixplore_core::engine::Episode::start(cfg, r)?;
        let mut gram = GramAccumulator::new(cfg.instance.d);
        for round in ep.log().warmup() {
            gram.absorb(&round.record.feature)?;
        }
        Ok(WarmupSpectrum {
            replicate: r,
            lambda_min: gram.min_eigen()?,
            lambda_diag: gram.diag_min(),
        })
    })?;
    let n = spectra.len().max(1) as f64;
    let fold = |f: fn(&WarmupSpectrum) -> f64| {
        let min = spectra.iter().map(f).fold(f64::INFINITY, f64::min);
        (min, spectra.iter().map(f).sum::<f64>() / n)
    };
    let (min_lambda_min, mean_lambda_min) = fold(|s| s.lambda_min);
    let (min_lambda_diag, mean_lambda_diag) = fold(|s| s.lambda_diag);
    let doc = DiversityOutput {
        provenance: Provenance::new("diversity", &loaded),
        warm_start: cfg.instance.warm_start,
        replicates: spectra,
        min_lambda_min,
        mean_lambda_min,
        min_lambda_diag,
        mean_lambda_diag,
    };
    let line = format!(
        "diversity: T0 = {}, lambda_min mean {mean_lambda_min:.6} (min {min_lambda_min:.6}), \
         lambda' mean {mean_lambda_diag:.6} (min {min_lambda_diag:.6})",
        doc.warm_start
    );
    let mut out = Outputs::default();
    out.add("diversity.json", json_bytes(&doc)?);
    let written = out.commit(&loaded.file.output.dir)?;
    Ok(Completed { written, line })
}
