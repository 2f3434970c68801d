use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RegimeConfig;
use super::finetune::TaskSpec;
use super::optim::Adam;
use crate::corpus::{Standardizer, TokenizerSpec};
use crate::error::{Error, Result};
use crate::tensor::io::TensorFile;
use crate::tensor::ParamStore;
use crate::transformer::{ModelConfig, Transformer};

pub const CHECKPOINT_FORMAT: &str = "hulm-checkpoint v1";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Everything besides tensors; stored as the TOML header of the tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    /// Optimizer steps taken by the run that produced the tensors.
    pub step: u64,
    /// Base seed; every random draw of a run is derived from it and `step`.
    pub seed: u64,
    /// Parameters excluded from optimization.
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Scaling of the pre-training regression attribute.
    pub standardizer: Option<Standardizer>,
    /// Scaling of the fine-tuning regression target.
    #[serde(default)]
    pub task_standardizer: Option<Standardizer>,
    pub model: ModelConfig,
    pub regime: RegimeConfig,
    pub tokenizer: TokenizerSpec,
    pub task: Option<TaskSpec>,
    /// Block budget the task head was trained with.
    #[serde(default)]
    pub task_max_blocks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Transformer> {
        Transformer::bind(&self.meta.model, &self.store)
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let header = toml::to_string(&self.meta).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
        let mut tensors = Vec::new();
        for (_, name, t) in self.store.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (prefix, moments) in [(M_PREFIX, &self.adam.m), (V_PREFIX, &self.adam.v)] {
            for (name, vals) in moments {
                let shape = self
                    .store
                    .by_name(name)
                    .ok_or_else(|| Error::contract(format!("optimizer moment for unknown parameter {name}")))?
                    .shape()
                    .to_vec();
                tensors.push((format!("{prefix}{name}"), crate::tensor::Tensor::new(shape, vals.clone())?));
            }
        }
        tensors.push((
            "adam.t".to_string(),
            crate::tensor::Tensor::scalar(self.adam.t as f64),
        ));
        Ok(TensorFile { header, tensors })
    }

    pub fn from_file(file: TensorFile) -> Result<Self> {
        let meta: CheckpointMeta =
            toml::from_str(&file.header).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                meta.format
            )));
        }
        let mut store = ParamStore::new();
        let mut adam = Adam::new();
        for (name, t) in file.tensors {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                adam.m.insert(p.to_string(), t.into_values());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                adam.v.insert(p.to_string(), t.into_values());
            } else if name == "adam.t" {
                adam.t = t.values()[0] as u64;
            } else {
                let trainable = !meta.frozen.contains(&name);
                let t = if trainable { t.with_grad() } else { t };
                store.insert(name, t);
            }
        }
        let ck = Self { meta, store, adam };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(TensorFile::load(path)?)
    }

    /// Names of parameters currently excluded from optimization.
    pub fn frozen_names(store: &ParamStore) -> Vec<String> {
        store
            .iter()
            .filter(|(_, _, t)| !t.requires_grad())
            .map(|(_, n, _)| n.to_string())
            .collect()
    }
}
