//! Run configuration: TOML loading, validation, digesting, and resolution
//! of the space and oracle backend a run will use.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::optimizer::{CertPolicy, CoupParams, RepulsionPolicy};
use crate::oracle::{
    DrawKey, ExternalOracle, MeanFn, Oracle, Outcome, ScriptedOracle, SyntheticOracle,
    UtilitySpec,
};
use crate::presets::{self, Preset};
use crate::rng::fnv1a64;
use crate::space::{ParamValue, Space, SpaceSpec, TemplateId};
use crate::surrogate::ForestParams;
use crate::{Error, Result};

fn default_budget_total() -> u64 {
    20_000
}

fn default_batch_size() -> u64 {
    20
}

fn default_initial_pool() -> u64 {
    50
}

fn default_delta() -> f64 {
    0.01
}

fn default_expansion_c() -> f64 {
    1.0
}

fn default_rejection_cap() -> u32 {
    crate::space::DEFAULT_REJECTION_CAP
}

fn default_cert() -> CertPolicy {
    CertPolicy::None
}

fn default_exploration_e() -> f64 {
    1.0
}

fn default_parallelism() -> usize {
    1
}

fn default_reeval_min() -> u64 {
    200
}

fn default_utility() -> UtilitySpec {
    UtilitySpec::ErrorRate
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_true() -> bool {
    true
}

/// Surrogate section of the config; `enabled = false` turns model-guided
/// proposals off entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(flatten)]
    pub params: ForestParams,
}

impl Default for SurrogateConfig {
    fn default() -> SurrogateConfig {
        SurrogateConfig {
            enabled: true,
            params: ForestParams::default(),
        }
    }
}

impl SurrogateConfig {
    pub fn to_params(&self) -> Option<ForestParams> {
        self.enabled.then(|| self.params.clone())
    }
}

/// One planted mean for the synthetic backend, keyed by a full parameter
/// assignment written as a map. Ordered so the config serializes to the
/// same bytes in every process; digests depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMean {
    pub id: BTreeMap<String, ParamValue>,
    pub mean: f64,
}

/// Which oracle evaluates templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Bernoulli outcomes at configured means; ground truth is known.
    Synthetic {
        default_mean: f64,
        #[serde(default)]
        planted: Vec<PlantedMean>,
    },
    /// A named synthetic environment bundling a space and planted means.
    Preset { name: String },
    /// Pre-recorded outcomes from a JSON table.
    Scripted { path: PathBuf },
    /// Line-JSON worker subprocess.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

/// Full description of a run. Everything except the backend has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget_total")]
    pub budget_total: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u64,
    /// Initial pool size n0.
    #[serde(default = "default_initial_pool")]
    pub initial_pool: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Expansion aggressiveness c.
    #[serde(default = "default_expansion_c")]
    pub expansion_c: f64,
    #[serde(default = "default_rejection_cap")]
    pub rejection_cap: u32,
    #[serde(default = "default_cert")]
    pub cert: CertPolicy,
    #[serde(default)]
    pub repulsion: RepulsionPolicy,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub pessimistic_schedule: bool,
    #[serde(default = "default_exploration_e")]
    pub exploration_e: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_reeval_min")]
    pub reevaluation_min_samples: u64,
    /// Inline space; optional when the backend is a preset carrying one.
    #[serde(default)]
    pub space: Option<SpaceSpec>,
    pub backend: BackendSpec,
    #[serde(default = "default_utility")]
    pub utility: UtilitySpec,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            budget_total: default_budget_total(),
            batch_size: default_batch_size(),
            initial_pool: default_initial_pool(),
            delta: default_delta(),
            expansion_c: default_expansion_c(),
            rejection_cap: default_rejection_cap(),
            cert: default_cert(),
            repulsion: RepulsionPolicy::default(),
            surrogate: SurrogateConfig::default(),
            pessimistic_schedule: false,
            exploration_e: default_exploration_e(),
            parallelism: default_parallelism(),
            reevaluation_min_samples: default_reeval_min(),
            space: None,
            backend: BackendSpec::Synthetic {
                default_mean: 0.3,
                planted: Vec::new(),
            },
            utility: default_utility(),
        }
    }
}

/// Whether a trace came from the adaptive loop or the uniform baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Coup,
    Uniform,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    /// Optimizer view of this config.
    pub fn coup_params(&self) -> CoupParams {
        CoupParams {
            delta: self.delta,
            initial_pool: self.initial_pool,
            expansion_c: self.expansion_c,
            rejection_cap: self.rejection_cap,
            cert: self.cert.clone(),
            repulsion: self.repulsion.clone(),
            surrogate: self.surrogate.to_params(),
            pessimistic_schedule: self.pessimistic_schedule,
            exploration_e: self.exploration_e,
        }
    }

    /// Stable content digest; snapshots refuse to resume under a config
    /// whose digest changed. Parallelism is normalized out first: dispatch
    /// width never changes results, and a resume on a machine with a
    /// different width must still match.
    pub fn digest(&self) -> String {
        let mut normalized = self.clone();
        normalized.parallelism = 1;
        let bytes = serde_json::to_vec(&normalized).expect("config serializes");
        format!("{:016x}", fnv1a64(&bytes))
    }

    /// Environment overrides: `COUP_ORACLE_CMD` replaces an external
    /// backend's command line (whitespace-split), `COUP_PARALLELISM` the
    /// dispatch width.
    pub fn apply_env_overrides(
        &mut self,
        oracle_cmd: Option<&str>,
        parallelism: Option<&str>,
    ) -> Result<()> {
        if let Some(cmd) = oracle_cmd {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if parts.is_empty() {
                return Err(Error::Config("COUP_ORACLE_CMD is empty".into()));
            }
            match &mut self.backend {
                BackendSpec::External { command, .. } => *command = parts,
                other => {
                    return Err(Error::Config(format!(
                        "COUP_ORACLE_CMD set but backend is {}",
                        backend_kind(other)
                    )))
                }
            }
        }
        if let Some(width) = parallelism {
            self.parallelism = width
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("COUP_PARALLELISM: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self, mode: RunMode) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.budget_total < self.initial_pool {
            return Err(Error::Config(format!(
                "budget_total {} below initial pool {}",
                self.budget_total, self.initial_pool
            )));
        }
        if mode == RunMode::Coup {
            if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "batch_size must be even and at least 2, got {}",
                    self.batch_size
                )));
            }
            // Exact budget accounting over even-sized batches needs the
            // budget to split into whole batches.
            if !self.budget_total.is_multiple_of(self.batch_size) {
                return Err(Error::Config(format!(
                    "budget_total {} is not a multiple of batch_size {}",
                    self.budget_total, self.batch_size
                )));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.rejection_cap == 0 {
            return Err(Error::Config("rejection_cap must be at least 1".into()));
        }
        match &self.cert {
            CertPolicy::None => {}
            CertPolicy::Fixed { tau } | CertPolicy::Adaptive { tau0: tau } => {
                if !(*tau > 0.0 && *tau <= 1.0) {
                    return Err(Error::Config(format!(
                        "certification threshold must lie in (0, 1], got {tau}"
                    )));
                }
            }
        }
        if !(self.repulsion.lambda >= 0.0 && self.repulsion.lambda.is_finite()) {
            return Err(Error::Config("repulsion lambda must be finite and >= 0".into()));
        }
        if !(self.repulsion.epsilon_ref >= 0.0 && self.repulsion.epsilon_ref.is_finite()) {
            return Err(Error::Config("epsilon_ref must be finite and >= 0".into()));
        }
        match &self.backend {
            BackendSpec::Synthetic {
                default_mean,
                planted,
            } => {
                for mean in std::iter::once(default_mean).chain(planted.iter().map(|p| &p.mean))
                {
                    if !(0.0..=1.0).contains(mean) {
                        return Err(Error::Config(format!(
                            "synthetic means must lie in [0, 1], got {mean}"
                        )));
                    }
                }
            }
            BackendSpec::External {
                command,
                timeout_ms,
            } => {
                if command.is_empty() {
                    return Err(Error::Config("external backend command is empty".into()));
                }
                if *timeout_ms == 0 {
                    return Err(Error::Config("external timeout_ms must be positive".into()));
                }
            }
            BackendSpec::Preset { .. } | BackendSpec::Scripted { .. } => {}
        }
        if self.space.is_none() && !matches!(self.backend, BackendSpec::Preset { .. }) {
            return Err(Error::Config(
                "config defines no space and the backend is not a preset".into(),
            ));
        }
        Ok(())
    }

    /// Builds the space and oracle this config describes. Synthetic and
    /// preset backends also expose their ground-truth means.
    pub fn resolve(&self) -> Result<ResolvedEnv> {
        match &self.backend {
            BackendSpec::Preset { name } => {
                let preset = presets::by_name(name, self.seed)?;
                let space = Space::new(preset.space.clone())?;
                let oracle = ResolvedOracle::Synthetic(SyntheticOracle::new(
                    self.seed,
                    preset.means.clone(),
                ));
                Ok(ResolvedEnv {
                    space,
                    oracle,
                    means: Some(preset.means.clone()),
                    preset: Some(preset),
                })
            }
            BackendSpec::Synthetic {
                default_mean,
                planted,
            } => {
                let space = self.require_space()?;
                let mut table = HashMap::new();
                for p in planted {
                    let id = canonical_id(&space, &p.id)?;
                    space.encode_features(&id)?;
                    table.insert(id, p.mean);
                }
                let means = MeanFn::Table {
                    default: *default_mean,
                    planted: table,
                };
                Ok(ResolvedEnv {
                    space,
                    oracle: ResolvedOracle::Synthetic(SyntheticOracle::new(
                        self.seed,
                        means.clone(),
                    )),
                    means: Some(means),
                    preset: None,
                })
            }
            BackendSpec::Scripted { path } => {
                let space = self.require_space()?;
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
                Ok(ResolvedEnv {
                    space,
                    oracle: ResolvedOracle::Scripted(ScriptedOracle::from_json(&text)?),
                    means: None,
                    preset: None,
                })
            }
            BackendSpec::External {
                command,
                timeout_ms,
            } => {
                let space = self.require_space()?;
                let oracle = crate::oracle::spawn_external(
                    command,
                    Duration::from_millis(*timeout_ms),
                    self.seed,
                )?;
                Ok(ResolvedEnv {
                    space,
                    oracle: ResolvedOracle::External(oracle),
                    means: None,
                    preset: None,
                })
            }
        }
    }

    fn require_space(&self) -> Result<Space> {
        let spec = self
            .space
            .clone()
            .ok_or_else(|| Error::Config("config defines no space".into()))?;
        Space::new(spec)
    }
}

fn backend_kind(b: &BackendSpec) -> &'static str {
    match b {
        BackendSpec::Synthetic { .. } => "synthetic",
        BackendSpec::Preset { .. } => "preset",
        BackendSpec::Scripted { .. } => "scripted",
        BackendSpec::External { .. } => "external",
    }
}

/// Orders a name->value map into a TemplateId following the space's
/// parameter order; every parameter must be present, nothing extra.
pub fn canonical_id(space: &Space, values: &BTreeMap<String, ParamValue>) -> Result<TemplateId> {
    let names: Vec<&str> = space.spec().params.iter().map(|p| p.name.as_str()).collect();
    if values.len() != names.len() {
        return Err(Error::Config(format!(
            "id has {} values, space has {} parameters",
            values.len(),
            names.len()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let v = values
            .get(name)
            .ok_or_else(|| Error::Config(format!("id missing parameter {name}")))?;
        out.push((name.to_owned(), v.clone()));
    }
    Ok(TemplateId { values: out })
}

/// A config's resolved runtime pieces.
pub struct ResolvedEnv {
    pub space: Space,
    pub oracle: ResolvedOracle,
    /// Ground-truth means when the backend is synthetic.
    pub means: Option<MeanFn>,
    pub preset: Option<Preset>,
}

/// Concrete oracle dispatch without boxing.
pub enum ResolvedOracle {
    Synthetic(SyntheticOracle),
    Scripted(ScriptedOracle),
    External(Arc<ExternalOracle>),
}

impl Oracle for ResolvedOracle {
    fn evaluate(&self, id: &TemplateId, key: DrawKey) -> Result<Outcome> {
        match self {
            ResolvedOracle::Synthetic(o) => o.evaluate(id, key),
            ResolvedOracle::Scripted(o) => o.evaluate(id, key),
            ResolvedOracle::External(o) => o.evaluate(id, key),
        }
    }

    fn true_mean(&self, id: &TemplateId) -> Option<f64> {
        match self {
            ResolvedOracle::Synthetic(o) => o.true_mean(id),
            ResolvedOracle::Scripted(o) => o.true_mean(id),
            ResolvedOracle::External(o) => o.true_mean(id),
        }
    }
}
