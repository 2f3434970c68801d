//! TOML configuration files. Relative paths inside a config file are
//! resolved against the file's directory; command-line flags override
//! file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hulm_core::corpus::{SyntheticSpec, TokenizerSpec};
use hulm_core::training::{FinetuneConfig, LrSpace, RegimeConfig};
use hulm_core::transformer::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    hulm_core::Error::Config(msg.into()).into()
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("in config {}", path.display()))
}

/// Loads `path` when given, otherwise the type's defaults; returns the
/// directory relative paths are resolved against.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, PathBuf)> {
    match path {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((load_toml(p)?, base))
        }
        None => Ok((T::default(), PathBuf::new())),
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn require(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| config_error(format!("no {what} given (config file or --{what})")))
}

fn d_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: d_ratios(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub corpus: SyntheticSpec,
    pub split: SplitConfig,
}

/// A learning-rate search run before the main training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSearchConfig {
    pub low: f64,
    pub high: f64,
    pub trials: usize,
    pub grid: Option<Vec<f64>>,
    pub seed: u64,
    /// Epochs per trial; defaults to the run's epoch count.
    pub epochs: Option<usize>,
}

impl Default for LrSearchConfig {
    fn default() -> Self {
        Self {
            low: 1e-4,
            high: 1e-2,
            trials: 4,
            grid: None,
            seed: 0,
            epochs: None,
        }
    }
}

impl LrSearchConfig {
    pub fn space(&self) -> LrSpace {
        match &self.grid {
            Some(g) => LrSpace::grid(g.clone()),
            None => LrSpace::log_uniform(self.low, self.high, self.trials, self.seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Base architecture; `[model]` entries override individual fields.
    pub preset: String,
    pub model: toml::Table,
    pub regime: RegimeConfig,
    pub tokenizer: Option<TokenizerSpec>,
    pub lr_search: Option<LrSearchConfig>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            preset: "desk".into(),
            model: toml::Table::new(),
            regime: RegimeConfig::default(),
            tokenizer: None,
            lr_search: None,
        }
    }
}

/// Preset geometry with per-field overrides applied.
pub fn resolve_model(preset: &str, overrides: &toml::Table) -> Result<ModelConfig> {
    let base = ModelConfig::preset(preset)?;
    let mut table = toml::Table::try_from(&base).context("serializing model preset")?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let cfg: ModelConfig = table.try_into().context("in [model]")?;
    Ok(cfg)
}

/// What a pre-training run actually used.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedPretrain {
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
    pub regime: RegimeConfig,
    pub tokenizer: TokenizerSpec,
    pub lr_search: Option<LrSearchConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFile {
    pub checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Author attribute whose age-scheme bucket annotates predictions.
    pub bucket_by: Option<String>,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedFinetune {
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub bucket_by: Option<String>,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferFile {
    pub checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub regime: RegimeConfig,
}

impl Default for TransferFile {
    fn default() -> Self {
        Self {
            checkpoint: None,
            train: None,
            dev: None,
            regime: RegimeConfig::new(hulm_core::training::Regime::GroupIndividual),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedTransfer {
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub regime: RegimeConfig,
}
