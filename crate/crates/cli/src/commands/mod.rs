use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hulm_core::corpus::{Corpus, Standardizer};
use hulm_core::training::{
    author_examples, AttributeKind, AuthorExample, DevRecord, RegimeConfig, StepLog, TargetSpec, TrainObserver,
    TrainState,
};

use crate::rundir::RunDir;

pub mod compare;
pub mod evaluate;
pub mod finetune;
pub mod generate;
pub mod pretrain;
pub mod transfer;

/// What a command reports on stdout: human text, or JSON under `--json`.
pub struct Outcome {
    pub text: String,
    pub json: serde_json::Value,
}

pub fn load_corpus(run: Option<&mut RunDir>, path: &Path) -> Result<Corpus> {
    let c = Corpus::ingest(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if let Some(run) = run {
        run.input(path)?;
    }
    Ok(c)
}

/// Standardizer for a continuous attribute, fitted on the training split.
pub fn fit_standardizer(regime: &RegimeConfig, train: &Corpus) -> Result<Option<Standardizer>> {
    match (regime.attribute.as_deref(), regime.kind()) {
        (Some(a), Some(AttributeKind::Continuous)) => Ok(Some(Standardizer::fit(train, a)?)),
        _ => Ok(None),
    }
}

/// Blocks a split for the state's model and regime, with attribute targets
/// when the regime has an auxiliary task and `with_targets` is set.
pub fn examples_for(state: &TrainState, corpus: &Corpus, with_targets: bool) -> Result<Vec<AuthorExample>> {
    let regime = state.regime();
    let tok = state.meta.tokenizer.build()?;
    let target = match (&regime.attribute, regime.kind()) {
        (Some(a), Some(kind)) if with_targets => Some(TargetSpec {
            attribute: a,
            kind,
            standardizer: state.meta.standardizer.unwrap_or(Standardizer::IDENTITY),
        }),
        _ => None,
    };
    Ok(author_examples(
        corpus,
        tok.as_ref(),
        state.model.config().block_len,
        regime.max_blocks,
        target,
    )?)
}

/// Collects the loss and dev logs and saves per-epoch and best checkpoints.
pub struct RunObserver {
    dir: PathBuf,
    pub losses: Vec<String>,
    pub dev: Vec<String>,
    pub files: Vec<String>,
}

impl RunObserver {
    pub fn new(run: &RunDir) -> Result<Self> {
        Ok(Self {
            dir: run.ensure_dir("checkpoints")?,
            losses: vec![StepLog::CSV_HEADER.to_string()],
            dev: vec![DevRecord::CSV_HEADER.to_string()],
            files: Vec::new(),
        })
    }

    fn save(&mut self, state: &TrainState, name: &str) -> hulm_core::Result<()> {
        state.checkpoint().save(self.dir.join(name))?;
        let rel = format!("checkpoints/{name}");
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        Ok(())
    }

    /// Writes the logs and records every checkpoint in the manifest.
    pub fn finish(self, run: &mut RunDir, loss_name: &str, dev_name: &str) -> Result<()> {
        run.write(loss_name, self.losses.join("\n") + "\n")?;
        run.write(dev_name, self.dev.join("\n") + "\n")?;
        for f in &self.files {
            run.record(f)?;
        }
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, log: &StepLog) -> hulm_core::Result<()> {
        self.losses.push(log.csv_row());
        Ok(())
    }

    fn on_epoch(&mut self, record: &DevRecord, state: &TrainState, is_best: bool) -> hulm_core::Result<()> {
        self.dev.push(record.csv_row());
        self.save(state, &format!("epoch-{:03}.ckpt", record.epoch))?;
        if is_best {
            self.save(state, "best.ckpt")?;
        }
        Ok(())
    }
}
