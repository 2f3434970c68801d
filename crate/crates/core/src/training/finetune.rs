use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::AttributeKind;
use super::data::{
    author_examples, author_representation, doc_examples, last_token_representation, AuthorExample, DocExample,
    DocSelection, TargetSpec,
};
use super::derive_seed;
use super::optim::Adam;
use super::pretrain::{TrainObserver, TrainState, ATTR_HEAD};
use crate::corpus::{BlockSequence, Corpus, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{BucketScheme, MetricKind, PredictionRow, PredictionSet, Unit};
use crate::human_context::process_author;
use crate::objectives::{ce_loss, mse_loss, Head, LossVariances};
use crate::tensor::{ParamId, Tape, Var};

/// Per-example loss gradients, sorted by parameter id.
type ParamGrads = Vec<(ParamId, Vec<f64>)>;

/// Prefix of the fine-tuning head.
pub const TASK_HEAD: &str = "task";

const SHUFFLE_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;

/// A downstream task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Regress an author attribute from the author representation.
    UserRegression { attribute: String },
    /// Classify labeled documents from the last non-padded token.
    DocClassification {
        label: String,
        classes: Vec<String>,
        /// Prepend the author's strictly earlier documents.
        #[serde(default)]
        history: bool,
        /// Only documents whose labels include all of these pairs.
        #[serde(default)]
        filter: BTreeMap<String, String>,
    },
}

impl TaskSpec {
    pub fn unit(&self) -> Unit {
        match self {
            TaskSpec::UserRegression { .. } => Unit::Author,
            TaskSpec::DocClassification { .. } => Unit::Document,
        }
    }

    pub fn default_metric(&self) -> MetricKind {
        match self {
            TaskSpec::UserRegression { .. } => MetricKind::Pearson,
            TaskSpec::DocClassification { .. } => MetricKind::F1Weighted,
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            TaskSpec::UserRegression { .. } => 1,
            TaskSpec::DocClassification { classes, .. } => classes.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskSpec::DocClassification { classes, .. } = self {
            if classes.len() < 2 {
                return Err(Error::config("a classification task needs at least two classes"));
            }
            let mut sorted = classes.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != classes.len() {
                return Err(Error::config("duplicate class names"));
            }
        }
        Ok(())
    }
}

fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    3
}
fn d_batch() -> usize {
    8
}
fn d_blocks() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: TaskSpec,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_blocks")]
    pub max_blocks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Train only the task head.
    #[serde(default)]
    pub freeze_backbone: bool,
    /// Development metric for epoch selection; defaults per task kind.
    #[serde(default)]
    pub metric: Option<MetricKind>,
}

impl FinetuneConfig {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            lr: d_lr(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            max_blocks: d_blocks(),
            seed: 0,
            freeze_backbone: false,
            metric: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_blocks == 0 {
            return Err(Error::config("epochs, batch_size and max_blocks must be positive"));
        }
        let metric = self.metric();
        let class_task = matches!(self.task, TaskSpec::DocClassification { .. });
        if metric.is_classification() != class_task || metric == MetricKind::Perplexity {
            return Err(Error::config(format!("metric {} does not fit this task", metric.name())));
        }
        Ok(())
    }

    pub fn metric(&self) -> MetricKind {
        self.metric.clone().unwrap_or_else(|| self.task.default_metric())
    }
}

/// Examples of a task, blocked with the checkpoint's tokenizer.
#[derive(Clone, Debug)]
pub enum TaskData {
    Users(Vec<AuthorExample>),
    Docs(Vec<DocExample>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Users(v) => v.len(),
            TaskData::Docs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn seq(&self, i: usize) -> &BlockSequence {
        match self {
            TaskData::Users(v) => &v[i].seq,
            TaskData::Docs(v) => &v[i].seq,
        }
    }

    fn id(&self, i: usize) -> String {
        match self {
            TaskData::Users(v) => v[i].seq.author_id.clone(),
            TaskData::Docs(v) => v[i].id.clone(),
        }
    }

    fn author_id(&self, i: usize) -> &str {
        match self {
            TaskData::Users(v) => &v[i].seq.author_id,
            TaskData::Docs(v) => &v[i].author_id,
        }
    }

    /// Gold value in reporting units: raw attribute or class index.
    fn gold(&self, i: usize) -> f64 {
        match self {
            TaskData::Users(v) => v[i].raw.expect("user examples carry targets"),
            TaskData::Docs(v) => v[i].label as f64,
        }
    }
}

/// Builds task examples. `standardizer` scales regression targets.
pub fn prepare_task(
    corpus: &Corpus,
    state: &TrainState,
    task: &TaskSpec,
    max_blocks: usize,
    standardizer: Standardizer,
) -> Result<TaskData> {
    let cfg = state.model.config();
    if max_blocks > cfg.max_blocks {
        return Err(Error::config(format!(
            "task max_blocks {max_blocks} exceeds the model's {}",
            cfg.max_blocks
        )));
    }
    let tok = state.meta.tokenizer.build()?;
    Ok(match task {
        TaskSpec::UserRegression { attribute } => {
            if !corpus.has_attribute(attribute) {
                return Err(Error::data(format!("corpus lacks attribute {attribute:?}")));
            }
            TaskData::Users(author_examples(
                corpus,
                tok.as_ref(),
                cfg.block_len,
                max_blocks,
                Some(TargetSpec {
                    attribute,
                    kind: AttributeKind::Continuous,
                    standardizer,
                }),
            )?)
        }
        TaskSpec::DocClassification {
            label,
            classes,
            history,
            filter,
        } => TaskData::Docs(doc_examples(
            corpus,
            tok.as_ref(),
            cfg.block_len,
            max_blocks,
            &DocSelection {
                label,
                classes,
                history: *history,
                filter,
            },
        )?),
    })
}

/// A checkpoint with a task head attached.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub state: TrainState,
    pub head: Head,
    pub task: TaskSpec,
    pub standardizer: Standardizer,
}

impl TaskModel {
    /// Attaches a fresh head for `task`.
    pub fn new(mut state: TrainState, task: TaskSpec, standardizer: Standardizer, seed: u64) -> Result<Self> {
        task.validate()?;
        let d = state.model.config().d_model;
        let head = Head::init(&mut state.store, TASK_HEAD, d, task.out_dim(), derive_seed(&[seed, 0x7461736b]));
        state.meta.task = Some(task.clone());
        Ok(Self {
            state,
            head,
            task,
            standardizer,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let task = ck
            .meta
            .task
            .clone()
            .ok_or_else(|| Error::data("checkpoint has no fine-tuned task head"))?;
        let standardizer = ck.meta.task_standardizer.unwrap_or(Standardizer::IDENTITY);
        let head = Head::bind(&ck.store, TASK_HEAD)?;
        let state = TrainState::from_checkpoint(ck)?;
        Ok(Self {
            state,
            head,
            task,
            standardizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.state.checkpoint();
        ck.meta.task = Some(self.task.clone());
        ck.meta.task_standardizer = Some(self.standardizer);
        ck
    }

    /// Head output for example `i`: `[1, out]`.
    pub fn forward(&self, tape: &mut Tape, data: &TaskData, i: usize, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
        let st = &self.state;
        let seq = data.seq(i);
        let pass = process_author(&st.model, tape, &st.store, seq, st.mode(), rng)?;
        let rep = match data {
            TaskData::Users(_) => author_representation(tape, &pass, seq)?,
            TaskData::Docs(_) => last_token_representation(tape, &pass, seq)?,
        };
        self.head.forward(tape, &st.store, rep)
    }

    /// Predictions in reporting units: de-standardized values for
    /// regression, argmax class indices for classification.
    pub fn predict(&self, data: &TaskData) -> Result<Vec<f64>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let mut tape = Tape::new();
                let out = self.forward(&mut tape, data, i, None)?;
                let v = tape.value(out);
                Ok(match data {
                    TaskData::Users(_) => self.standardizer.inverse(v[0]),
                    TaskData::Docs(_) => {
                        let mut best = 0;
                        for (k, &x) in v.iter().enumerate() {
                            if x > v[best] {
                                best = k;
                            }
                        }
                        best as f64
                    }
                })
            })
            .collect()
    }

    /// Scored prediction rows. When `bucket_by` names an author attribute,
    /// rows carry its age-scheme bucket.
    pub fn prediction_set(&self, data: &TaskData, corpus: &Corpus, bucket_by: Option<&str>) -> Result<PredictionSet> {
        let preds = self.predict(data)?;
        let scheme = BucketScheme::age();
        let rows = (0..data.len())
            .map(|i| {
                let bucket = match bucket_by {
                    None => None,
                    Some(attr) => {
                        let a = corpus
                            .author(data.author_id(i))
                            .and_then(|a| a.attribute(attr))
                            .ok_or_else(|| Error::data(format!("author {:?} lacks {attr:?}", data.author_id(i))))?;
                        Some(scheme.name_of(a).to_string())
                    }
                };
                Ok(PredictionRow {
                    id: data.id(i),
                    prediction: preds[i],
                    gold: data.gold(i),
                    bucket,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (name, n_classes) = match &self.task {
            TaskSpec::UserRegression { attribute } => (attribute.clone(), None),
            TaskSpec::DocClassification { label, classes, .. } => (label.clone(), Some(classes.len())),
        };
        PredictionSet::new(self.task.unit(), name, n_classes, rows)
    }

    pub fn score(&self, data: &TaskData, metric: &MetricKind) -> Result<f64> {
        let preds = self.predict(data)?;
        let golds: Vec<f64> = (0..data.len()).map(|i| data.gold(i)).collect();
        let k = match &self.task {
            TaskSpec::DocClassification { classes, .. } => Some(classes.len()),
            _ => None,
        };
        metric.evaluate(&preds, &golds, k)
    }

    fn step(&mut self, data: &TaskData, batch: &[usize], lr: f64) -> Result<f64> {
        let step = self.state.meta.step;
        let seed = self.state.meta.seed;
        let dropout = self.state.model.config().dropout > 0.0;
        let scale = 1.0 / batch.len() as f64;
        let this = &*self;
        let results: Vec<(f64, ParamGrads)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut tape = Tape::new();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, DROPOUT_STREAM, step, j as u64]));
                let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut rng) } else { None };
                let out = this.forward(&mut tape, data, i, rng)?;
                let loss = match data {
                    TaskData::Users(v) => mse_loss(&mut tape, out, &[v[i].target.expect("targets present")])?,
                    TaskData::Docs(v) => ce_loss(&mut tape, out, &[v[i].label])?,
                };
                let value = tape.scalar(loss);
                let loss = tape.scale(loss, scale);
                tape.backward(loss)?;
                Ok((value, tape.param_grads()))
            })
            .collect::<Result<_>>()?;
        let store = &mut self.state.store;
        store.zero_grads();
        for (_, grads) in &results {
            for (id, g) in grads {
                store.get_mut(*id).accumulate_grad(g)?;
            }
        }
        let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::NumericDomain {
                op: "finetune",
                detail: format!("loss became {loss} at step {}", step + 1),
            });
        }
        self.state.adam.step(store, lr);
        self.state.meta.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: Option<f64>,
}

impl FinetuneRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,dev_metric";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.epoch,
            self.train_loss,
            self.dev_metric.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// The model at the best development epoch.
    pub model: TaskModel,
    pub best_epoch: usize,
    pub log: Vec<FinetuneRecord>,
}

/// Fine-tunes a pre-trained checkpoint on `train`, selecting the epoch with
/// the best development metric (the last epoch when `dev` is empty).
pub fn finetune(
    ck: Checkpoint,
    cfg: &FinetuneConfig,
    train: &TaskData,
    dev: &TaskData,
    standardizer: Standardizer,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training examples for the task"));
    }
    let mut state = TrainState::from_checkpoint(ck)?;
    state.adam = Adam::new();
    state.meta.step = 0;
    state.meta.seed = cfg.seed;
    let mut tm = TaskModel::new(state, cfg.task.clone(), standardizer, cfg.seed)?;
    tm.state.meta.task_max_blocks = Some(cfg.max_blocks);
    let store = &mut tm.state.store;
    // Pre-training heads and η are not part of the downstream objective.
    store.set_trainable(&format!("{ATTR_HEAD}."), false);
    store.set_trainable(LossVariances::LM, false);
    store.set_trainable(LossVariances::ATTR, false);
    if cfg.freeze_backbone {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| !n.starts_with(&format!("{TASK_HEAD}."))) {
            store.set_trainable(n, false);
        }
    }
    let metric = cfg.metric();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, TaskModel)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, SHUFFLE_STREAM, epoch as u64])));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += tm.step(train, batch, cfg.lr)? * batch.len() as f64;
        }
        let dev_metric = if dev.is_empty() {
            None
        } else {
            match tm.score(dev, &metric) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(why)) => {
                    log::warn!("epoch {}: dev {} undefined: {why}", epoch + 1, metric.name());
                    None
                }
                Err(e) => return Err(e),
            }
        };
        let rec = FinetuneRecord {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            dev_metric,
        };
        let key = match dev_metric {
            Some(v) if metric.higher_is_better() => v,
            Some(v) => -v,
            None => f64::NEG_INFINITY,
        };
        let is_best = dev.is_empty() || best.as_ref().is_none_or(|(_, b, _)| key > *b);
        if is_best {
            best = Some((epoch + 1, key, tm.clone()));
        }
        observer.on_epoch(
            &super::pretrain::DevRecord {
                epoch: epoch + 1,
                step: tm.state.meta.step,
                dev_ppl: None,
                dev_attr: dev_metric,
            },
            &tm.state,
            is_best,
        )?;
        log.push(rec);
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(FinetuneOutcome { model, best_epoch, log })
}
