//! The JSON experiment file: schema, overrides, and assembly into engine
//! types.

use std::path::{Path, PathBuf};

use ixplore_core::audit::{AuditMode, Scenario, ThresholdParams};
use ixplore_core::semantics::{build_voronoi_cover, CoverDomain, HypercubeCover};
use ixplore_core::{
    AgentModel, ExperimentConfig, Instance, ModelVector, PolicyKind, Prior, SemanticMap, TypeSource, WarmstartPlan,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "IXPLORE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub instance: Instance,
    pub prior: Prior,
    pub semantic_map: MapSpec,
    pub policy: PolicyKind,
    pub warmup: WarmstartPlan,
    pub types: TypeSource,
    pub agent_model: AgentModel,
    pub seed: u64,
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

/// How the semantic map is specified. Omitted parts are derived from the
/// prior and the type source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// Representatives default to the first type of each public label.
    ArgmaxDirect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        representatives: Option<Vec<ixplore_core::AgentType>>,
    },
    /// With `fiber_centroids`, menus for general types use centroids of a
    /// discrete prior's models.
    Ranking {
        #[serde(default)]
        fiber_centroids: bool,
    },
    /// Explicit centers, or a grid cover of the prior's support at `radius`.
    VoronoiCover {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centers: Option<Vec<ModelVector>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    HypercubeCover {
        origin: Vec<f64>,
        cell_radius: f64,
        extents: Vec<usize>,
    },
    SignMap,
    /// Models default to the discrete prior's support.
    FullReveal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        models: Option<Vec<ModelVector>>,
    },
}

impl MapSpec {
    pub fn build(&self, prior: &Prior, types: &TypeSource) -> Result<SemanticMap, CliError> {
        let discrete = || match prior {
            Prior::Discrete { models, .. } => Ok(models.clone()),
            _ => Err(CliError::Config(
                "this semantic map needs a discrete prior or explicit models".into(),
            )),
        };
        let map = match self {
            MapSpec::ArgmaxDirect { representatives } => {
                SemanticMap::argmax_direct(representatives.as_deref().unwrap_or(types.support()))
            }
            MapSpec::Ranking { fiber_centroids: false } => Ok(SemanticMap::ranking()),
            MapSpec::Ranking { fiber_centroids: true } => Ok(SemanticMap::ranking_with_fibers(&discrete()?)),
            MapSpec::VoronoiCover {
                centers: Some(c),
                radius: None,
            } => SemanticMap::voronoi(c.clone()),
            MapSpec::VoronoiCover {
                centers: None,
                radius: Some(r),
            } => {
                let domain = match prior {
                    Prior::UniformBall { radius, dim } => CoverDomain::Ball {
                        radius: *radius,
                        dim: *dim,
                    },
                    _ => {
                        let (lo, hi) = prior.bounding_box().ok_or_else(|| {
                            CliError::Config("voronoi radius needs a prior with bounded support".into())
                        })?;
                        CoverDomain::Box { lo, hi }
                    }
                };
                build_voronoi_cover(&domain, *r).and_then(SemanticMap::voronoi)
            }
            MapSpec::VoronoiCover { .. } => {
                return Err(CliError::Config(
                    "voronoi_cover needs exactly one of centers and radius".into(),
                ))
            }
            MapSpec::HypercubeCover {
                origin,
                cell_radius,
                extents,
            } => HypercubeCover::new(origin.clone(), *cell_radius, extents.clone()).map(SemanticMap::HypercubeCover),
            MapSpec::SignMap => match prior {
                Prior::Discrete { models, .. } => SemanticMap::sign(models),
                _ if prior.dim() == 1 => Ok(SemanticMap::SignMap),
                _ => Err(ixplore_core::Error::InvalidInput("sign map requires d = 1".into())),
            },
            MapSpec::FullReveal { models } => SemanticMap::full_reveal(match models {
                Some(m) => m.clone(),
                None => discrete()?,
            }),
        };
        map.map_err(|e| CliError::Config(format!("semantic_map: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditBlock {
    pub round: usize,
    pub epsilon: f64,
    pub c_cal: f64,
    pub scenario: Scenario,
    #[serde(default = "default_audit_mode")]
    pub mode: AuditMode,
    /// Defaults to the top-level replicate count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_grid: Option<Vec<f64>>,
    /// Prior draws for Monte Carlo primitives.
    #[serde(default = "default_primitive_samples")]
    pub primitive_samples: usize,
}

fn default_audit_mode() -> AuditMode {
    AuditMode::MonteCarlo
}

fn default_primitive_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// A loaded configuration together with the JSON it was parsed from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub file: ConfigFile,
    pub experiment: ExperimentConfig,
    /// SHA-256 of the canonical (sorted-key) JSON after overrides, with
    /// the `output` block left out.
    pub hash: String,
}

impl Loaded {
    pub fn threshold_params(&self) -> ThresholdParams {
        let mut p = match &self.file.audit {
            Some(a) => ThresholdParams::new(a.c_cal, a.scenario),
            None => ThresholdParams::new(1.0, Scenario::NonAdaptive),
        };
        if let Some(a) = &self.file.audit {
            if let Some(alpha) = a.alpha_margin {
                p.alpha_margin = alpha;
            }
            if let Some(grid) = &a.eps_grid {
                p.eps_grid = grid.clone();
            }
        }
        p.rho = match (&self.file.audit, &self.file.policy) {
            (Some(AuditBlock { rho: Some(r), .. }), _) => *r,
            (_, PolicyKind::Ucb { rho }) => *rho,
            _ => p.rho,
        };
        p
    }
}

/// Sets `path` (dot separated; numeric segments index arrays) to `value`,
/// creating objects as needed. `value` is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key.path=value")))?;
    if path.is_empty() {
        return Err(CliError::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for seg in path.split('.') {
        cur = match cur {
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| CliError::Config(format!("override `{path}`: `{seg}` is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("override `{path}`: index {i} out of range ({len})")))?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Object(Default::default())),
            other => {
                *other = Value::Object(Default::default());
                let Value::Object(map) = other else { unreachable!() };
                map.entry(seg.to_string()).or_insert(Value::Object(Default::default()))
            }
        };
    }
    *cur = value;
    Ok(())
}

/// Seed precedence: flag, then environment, then file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(raw) = env {
        return raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned 64-bit integer")));
    }
    Ok(file)
}

pub fn load(
    path: &Path,
    overrides: &[String],
    seed_flag: Option<u64>,
    seed_env: Option<&str>,
) -> Result<Loaded, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    from_value(doc, overrides, seed_flag, seed_env)
}

pub fn from_value(
    mut doc: Value,
    overrides: &[String],
    seed_flag: Option<u64>,
    seed_env: Option<&str>,
) -> Result<Loaded, CliError> {
    if !doc.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let file_seed = doc.get("seed").and_then(Value::as_u64);
    if let Some(seed) = resolve_seed(seed_flag, seed_env, file_seed)? {
        doc["seed"] = Value::from(seed);
    }
    let mut hashed = doc.clone();
    if let Some(map) = hashed.as_object_mut() {
        map.remove("output");
    }
    let hash = hex::encode(Sha256::digest(hashed.to_string().as_bytes()));
    let file: ConfigFile = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    let smap = file.semantic_map.build(&file.prior, &file.types)?;
    let experiment = ExperimentConfig {
        instance: file.instance.clone(),
        prior: file.prior.clone(),
        smap,
        policy: file.policy.clone(),
        warmup: file.warmup.clone(),
        types: file.types.clone(),
        agent_model: file.agent_model,
        seed: file.seed,
        replicates: file.replicates,
    };
    experiment.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(a) = &file.audit {
        if a.replicates == Some(0) {
            return Err(CliError::Config("audit.replicates must be at least 1".into()));
        }
    }
    Ok(Loaded { file, experiment, hash })
}
