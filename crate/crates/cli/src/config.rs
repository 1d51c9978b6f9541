//! Run configuration: a TOML file plus dotted-path overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use offpoc::agents::{AgentConfig, AgentKind, TrainSettings};
use offpoc::envs::make_env;
use offpoc::gaussian::DEFAULT_JSD_SAMPLES;
use offpoc::offpoc::{Divergence, JsdEstimator, OffPocConfig, Variant};
use offpoc::replay::SamplerKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_VAR: &str = "OFFPOC_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub agent: AgentKind,
    /// Where artifacts go; resolved against the output root when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub env: EnvSection,
    #[serde(default)]
    pub learner: AgentConfig,
    #[serde(default)]
    pub offpoc: OffPocSection,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    MonteCarlo,
    MomentMatched,
}

/// Off-policy correction settings. The exploration std is taken from the
/// learner so the two can never disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffPocSection {
    pub enabled: bool,
    /// Must match the agent kind when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub divergence: Divergence,
    pub jsd_estimator: EstimatorChoice,
    pub jsd_samples: usize,
}

impl Default for OffPocSection {
    fn default() -> Self {
        Self {
            enabled: false,
            variant: None,
            divergence: Divergence::Jsd,
            jsd_estimator: EstimatorChoice::MonteCarlo,
            jsd_samples: DEFAULT_JSD_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    Uniform,
    Cer,
    Per,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSection {
    pub capacity: usize,
    pub sampler: SamplerChoice,
    pub per_alpha: f64,
    pub per_beta: f64,
    pub per_epsilon: f64,
}

impl Default for BufferSection {
    fn default() -> Self {
        Self { capacity: 1_000_000, sampler: SamplerChoice::Uniform, per_alpha: 0.6, per_beta: 0.4, per_epsilon: 1e-6 }
    }
}

impl BufferSection {
    pub fn sampler_kind(&self) -> SamplerKind {
        match self.sampler {
            SamplerChoice::Uniform => SamplerKind::Uniform,
            SamplerChoice::Cer => SamplerKind::Cer,
            SamplerChoice::Per => SamplerKind::Per { alpha: self.per_alpha, beta: self.per_beta, epsilon: self.per_epsilon },
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `overrides` (`dotted.key=value`) in order, and validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, raw)?;
        }
        // round-trip through text so errors carry the offending key
        let resolved = toml::to_string(&table).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let cfg: RunConfig = toml::from_str(&resolved).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The learner configuration with the correction settings folded in.
    pub fn agent_config(&self) -> AgentConfig {
        let mut cfg = self.learner.clone();
        cfg.offpoc = self.offpoc.enabled.then(|| OffPocConfig {
            exploration_std: cfg.exploration_std,
            divergence: self.offpoc.divergence,
            jsd_estimator: match self.offpoc.jsd_estimator {
                EstimatorChoice::MonteCarlo => JsdEstimator::MonteCarlo { sample_count: self.offpoc.jsd_samples },
                EstimatorChoice::MomentMatched => JsdEstimator::MomentMatched,
            },
        });
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |msg: String| Err(CliError::Validation(msg));
        if self.learner.offpoc.is_some() {
            return invalid("learner.offpoc: configure the correction in the [offpoc] section".into());
        }
        if let Some(v) = self.offpoc.variant {
            if v != self.agent.variant() {
                return invalid(format!(
                    "offpoc.variant: {} correction cannot be used with the {} agent",
                    variant_name(v),
                    self.agent.name()
                ));
            }
        }
        if let Err(e) = make_env(&self.env.name, &self.env.params) {
            return invalid(format!("env: {e}"));
        }
        if let Err(e) = self.agent_config().validate(self.agent) {
            return invalid(format!("learner: {e}"));
        }
        if self.buffer.capacity < self.learner.batch_size {
            return invalid(format!(
                "buffer.capacity {} is smaller than learner.batch_size {}",
                self.buffer.capacity, self.learner.batch_size
            ));
        }
        if let Err(e) = offpoc::replay::ReplayBuffer::new(1, self.buffer.sampler_kind()) {
            return invalid(format!("buffer: {e}"));
        }
        let t = &self.train;
        if t.total_steps <= self.learner.exploration_steps {
            return invalid(format!(
                "train.total_steps {} must exceed learner.exploration_steps {}",
                t.total_steps, self.learner.exploration_steps
            ));
        }
        for (name, v) in [
            ("eval_interval", t.eval_interval),
            ("diagnostics_interval", t.diagnostics_interval),
            ("update_interval", t.update_interval),
            ("eval_episodes", t.eval_episodes as u64),
        ] {
            if v == 0 {
                return invalid(format!("train.{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Explicit output dir, else `<root>/<name>` with the root taken from
    /// [`OUTPUT_ROOT_VAR`] (default `runs`).
    pub fn resolve_output_dir(&self, name: &str) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Deterministic => "deterministic",
        Variant::Stochastic => "stochastic",
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {s:?} is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Sets `a.b.c = raw` inside `table`. `raw` is read as a TOML value, falling
/// back to a plain string (so `--set env.name=pendulum` works unquoted).
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
