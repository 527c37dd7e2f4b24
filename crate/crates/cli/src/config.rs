//! Experiment configuration files (JSON). Every block is optional; missing
//! keys take the library defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use fedrec_core::aggregation::AggregatorConfig;
use fedrec_core::federation::{FederationConfig, ModelConfig, DEFAULT_EPOCHS};
use fedrec_core::{AttackConfig, SyntheticSpec};
use serde::{Deserialize, Serialize};

/// Directory searched for relative dataset paths when set.
pub const DATA_DIR_ENV: &str = "FEDREC_DATA_DIR";
pub const DEFAULT_DATASET: &str = "ml-100k/u.data";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationBlock,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

/// Either a rating file or a synthetic generator; a file is the default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// MovieLens-style file. Relative paths resolve against
    /// `$FEDREC_DATA_DIR`, falling back to `./data`.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationBlock {
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FederationBlock {
    fn default() -> Self {
        FederationBlock {
            epochs: DEFAULT_EPOCHS,
            eval_every: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub breakdown_points: Vec<f64>,
    pub malicious_counts: Vec<usize>,
    pub x_min: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            breakdown_points: vec![0.5],
            malicious_counts: vec![0, 10, 29, 49, 105, 166, 197, 1000],
            x_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File stem for every output of a run.
    pub label: String,
    /// Also write a long-format `epoch,metric,value` CSV.
    pub plot_data: bool,
    /// Also write the per-item aggregation log as JSON lines.
    pub round_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            label: "run".into(),
            plot_data: false,
            round_log: false,
        }
    }
}

/// A config problem, located by its dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "invalid config: {}", self.message)
        } else {
            write!(f, "invalid config at `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn error(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, anyhow::Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    Ok(parse_config(&text)?)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.path.is_some() && self.dataset.synthetic.is_some() {
            return Err(error("dataset", "set either `path` or `synthetic`, not both"));
        }
        if let Some(s) = &self.dataset.synthetic {
            if !(s.exponent > 1.0 && s.exponent.is_finite()) {
                return Err(error("dataset.synthetic.exponent", format!("must be > 1, got {}", s.exponent)));
            }
        }
        self.federation_config()
            .validate()
            .map_err(|e| match e {
                fedrec_core::federation::FederationError::InvalidConfig { field, message } => error(field, message),
                fedrec_core::federation::FederationError::Attack(
                    fedrec_core::attacks::AttackError::InvalidConfig { field, message },
                ) => error(field, message),
                other => error("", other.to_string()),
            })?;
        for (i, &a) in self.analysis.breakdown_points.iter().enumerate() {
            if !(a > 0.0 && a <= 0.5) {
                return Err(error(
                    &format!("analysis.breakdown_points[{i}]"),
                    format!("must lie in (0, 0.5], got {a}"),
                ));
            }
        }
        if !(self.analysis.x_min > 0.0 && self.analysis.x_min.is_finite()) {
            return Err(error("analysis.x_min", format!("must be > 0, got {}", self.analysis.x_min)));
        }
        if self.output.label.is_empty() || self.output.label.contains(['/', '\\']) {
            return Err(error("output.label", "must be a non-empty file stem"));
        }
        Ok(())
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            epochs: self.federation.epochs,
            eval_every: self.federation.eval_every,
            seed: self.federation.seed,
            model: self.model.clone(),
            aggregator: self.aggregator,
            attack: self.attack.clone(),
        }
    }

    /// The dataset file this config reads, if it reads one.
    pub fn dataset_path(&self) -> Option<PathBuf> {
        if self.dataset.synthetic.is_some() {
            return None;
        }
        let path = self
            .dataset
            .path
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATASET));
        if path.is_absolute() {
            return Some(path);
        }
        let base = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"));
        Some(base.join(path))
    }
}
