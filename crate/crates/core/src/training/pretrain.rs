use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
use super::config::{AttributeKind, RegimeConfig};
use super::data::{author_representation, AuthorExample};
use super::derive_seed;
use super::optim::Adam;
use crate::corpus::{Standardizer, TokenizerSpec};
use crate::error::{Error, Result};
use crate::eval::{pearson_r, perplexity};
use crate::human_context::{process_author, PassMode};
use crate::objectives::{
    attribute_classification_loss, attribute_regression_loss, combine, pass_nll, shifted_targets, Head,
    LossVariances,
};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor};
use crate::transformer::{ModelConfig, Transformer};

/// Prefix of the pre-training attribute head.
pub const ATTR_HEAD: &str = "attr";

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// A model, its parameters and optimizer, plus the run metadata.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Transformer,
    pub store: ParamStore,
    pub adam: Adam,
    pub meta: CheckpointMeta,
    pub head: Option<Head>,
    pub etas: Option<LossVariances>,
}

impl TrainState {
    /// Fresh parameters for `regime`; the attribute head and η exist only for
    /// regimes with an auxiliary task.
    pub fn init(
        model: &ModelConfig,
        regime: RegimeConfig,
        tokenizer: TokenizerSpec,
        standardizer: Option<Standardizer>,
    ) -> Result<Self> {
        regime.validate()?;
        model.validate()?;
        if regime.max_blocks > model.max_blocks {
            return Err(Error::config(format!(
                "regime max_blocks {} exceeds the model's {}",
                regime.max_blocks, model.max_blocks
            )));
        }
        let mut store = ParamStore::new();
        let m = Transformer::init(model, regime.seed, &mut store)?;
        let (head, etas) = if regime.regime.needs_attribute() {
            (
                Some(Head::init(&mut store, ATTR_HEAD, model.d_user(), 1, regime.seed)),
                Some(LossVariances::init(&mut store)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            model: m,
            store,
            adam: Adam::new(),
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.to_string(),
                step: 0,
                seed: regime.seed,
                frozen: Vec::new(),
                standardizer,
                task_standardizer: None,
                model: model.clone(),
                regime,
                tokenizer,
                task: None,
                task_max_blocks: None,
            },
            head,
            etas,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let (head, etas) = if ck.meta.regime.regime.needs_attribute() {
            (Some(Head::bind(&ck.store, ATTR_HEAD)?), Some(LossVariances::bind(&ck.store)?))
        } else {
            (None, None)
        };
        Ok(Self {
            model,
            store: ck.store,
            adam: ck.adam,
            meta: ck.meta,
            head,
            etas,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta.frozen = Checkpoint::frozen_names(&self.store);
        Checkpoint {
            meta,
            store: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn regime(&self) -> &RegimeConfig {
        &self.meta.regime
    }

    pub fn mode(&self) -> PassMode {
        self.meta.regime.regime.mode()
    }
}

/// One optimizer step's losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_ce: f64,
    pub l_aux: Option<f64>,
    pub eta_lm: Option<f64>,
    pub eta_attr: Option<f64>,
    pub combined: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,l_ce,l_aux,eta_lm,eta_attr,combined";

    pub fn csv_row(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.l_ce,
            o(self.l_aux),
            o(self.eta_lm),
            o(self.eta_attr),
            self.combined
        )
    }
}

struct AuthorResult {
    nll: f64,
    count: usize,
    aux: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

/// `∂J/∂L_ce` and `∂J/∂L_aux` of the combine rule at the current η. Every
/// rule is linear in the task losses, so these do not depend on the losses.
fn loss_coefficients(state: &TrainState) -> Result<(f64, f64)> {
    let (Some(rule), Some(etas)) = (state.meta.regime.rule(), state.etas) else {
        return Ok((1.0, 0.0));
    };
    let mut tape = Tape::new();
    let l_ce = tape.leaf(&Tensor::scalar(0.0).with_grad());
    let l_aux = tape.leaf(&Tensor::scalar(0.0).with_grad());
    let e_ce = tape.param(&state.store, etas.lm);
    let e_aux = tape.param(&state.store, etas.attr);
    let j = combine(&mut tape, rule, l_ce, l_aux, e_ce, e_aux)?;
    tape.backward(j)?;
    Ok((tape.grad(l_ce).unwrap()[0], tape.grad(l_aux).unwrap()[0]))
}

/// One step over a batch of whole authors. Each author is differentiated on
/// its own tape (in parallel); gradients are summed in batch order.
pub fn train_step(state: &mut TrainState, batch: &[&AuthorExample]) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let regime = state.meta.regime.clone();
    let aux_kind = regime.kind();
    if aux_kind.is_some() && batch.iter().any(|e| e.target.is_none()) {
        return Err(Error::contract("auxiliary regime needs an attribute target for every author"));
    }
    let n_tokens: usize = batch
        .iter()
        .flat_map(|e| &e.seq.blocks)
        .map(|b| shifted_targets(&b.tokens, &b.mask).1.iter().filter(|&&w| w > 0.0).count())
        .sum();
    if n_tokens == 0 {
        return Err(Error::contract("every position in the batch is padded; no next-token targets"));
    }
    let (c_ce, c_aux) = loss_coefficients(state)?;
    let w_ce = c_ce / n_tokens as f64;
    let w_aux = c_aux / batch.len() as f64;
    let mode = regime.regime.mode();
    let step = state.meta.step;
    let seed = state.meta.seed;
    let dropout = state.model.config().dropout > 0.0;
    let (model, store, head) = (&state.model, &state.store, state.head.as_ref());

    let results: Vec<AuthorResult> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, DROPOUT_STREAM, step, i as u64]));
            let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut rng) } else { None };
            let pass = process_author(model, &mut tape, store, &ex.seq, mode, rng)?;
            let mut loss = None;
            let (mut nll, mut count) = (0.0, 0);
            if let Some((v, n)) = pass_nll(&mut tape, &pass, &ex.seq)? {
                nll = tape.scalar(v);
                count = n;
                loss = Some(tape.scale(v, w_ce));
            }
            let mut aux = 0.0;
            if let (Some(kind), Some(head)) = (aux_kind, head) {
                let rep = author_representation(&mut tape, &pass, &ex.seq)?;
                let y = [ex.target.expect("checked above")];
                let a = match kind {
                    AttributeKind::Continuous => attribute_regression_loss(&mut tape, store, head, rep, &y)?,
                    AttributeKind::Binary => attribute_classification_loss(&mut tape, store, head, rep, &y)?,
                };
                aux = tape.scalar(a);
                let a = tape.scale(a, w_aux);
                loss = Some(match loss {
                    Some(l) => tape.add(l, a)?,
                    None => a,
                });
            }
            let grads = match loss {
                Some(l) => {
                    tape.backward(l)?;
                    tape.param_grads()
                }
                None => Vec::new(),
            };
            Ok(AuthorResult { nll, count, aux, grads })
        })
        .collect::<Result<_>>()?;

    state.store.zero_grads();
    for r in &results {
        for (id, g) in &r.grads {
            state.store.get_mut(*id).accumulate_grad(g)?;
        }
    }
    let l_ce = results.iter().map(|r| r.nll).sum::<f64>() / results.iter().map(|r| r.count).sum::<usize>() as f64;
    let mut log = StepLog {
        step: step + 1,
        l_ce,
        l_aux: None,
        eta_lm: None,
        eta_attr: None,
        combined: l_ce,
    };
    if let (Some(rule), Some(etas)) = (regime.rule(), state.etas) {
        let l_aux = results.iter().map(|r| r.aux).sum::<f64>() / results.len() as f64;
        let mut tape = Tape::new();
        let a = tape.constant(vec![1], vec![l_ce])?;
        let b = tape.constant(vec![1], vec![l_aux])?;
        let e_ce = tape.param(&state.store, etas.lm);
        let e_aux = tape.param(&state.store, etas.attr);
        let j = combine(&mut tape, rule, a, b, e_ce, e_aux)?;
        tape.backward(j)?;
        tape.accumulate_param_grads(&mut state.store)?;
        let (el, ea) = etas.values(&state.store);
        log.l_aux = Some(l_aux);
        log.eta_lm = Some(el);
        log.eta_attr = Some(ea);
        log.combined = tape.scalar(j);
    }
    if !log.combined.is_finite() {
        return Err(Error::NumericDomain {
            op: "train_step",
            detail: format!("loss became {} at step {}", log.combined, step + 1),
        });
    }
    state.adam.step(&mut state.store, regime.lr);
    state.meta.step += 1;
    Ok(log)
}

/// Epoch-end development metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub epoch: usize,
    pub step: u64,
    pub dev_ppl: Option<f64>,
    /// Pearson r (continuous) or accuracy (binary) of the attribute head.
    pub dev_attr: Option<f64>,
}

impl DevRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,dev_ppl,dev_attr";

    pub fn csv_row(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.step, o(self.dev_ppl), o(self.dev_attr))
    }
}

/// Hooks for run-directory writers.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &DevRecord, _state: &TrainState, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Stop once the total step count reaches this value.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub losses: Vec<StepLog>,
    pub dev_log: Vec<DevRecord>,
    /// Parameters of the epoch with the lowest dev perplexity.
    pub best: Option<(usize, ParamStore)>,
}

pub fn steps_per_epoch(n_examples: usize, batch_size: usize) -> u64 {
    n_examples.div_ceil(batch_size) as u64
}

/// Example order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SHUFFLE_STREAM, epoch as u64])));
    idx
}

/// Attribute predictions in original units (continuous) or probabilities
/// (binary), one per example.
pub fn predict_attribute(state: &TrainState, examples: &[AuthorExample]) -> Result<Vec<f64>> {
    let head = state.head.as_ref().ok_or_else(|| Error::contract("this run has no attribute head"))?;
    let kind = state.meta.regime.kind().expect("head implies an attribute");
    let std = state.meta.standardizer.unwrap_or(Standardizer::IDENTITY);
    examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let pass = process_author(&state.model, &mut tape, &state.store, &ex.seq, state.mode(), None)?;
            let rep = author_representation(&mut tape, &pass, &ex.seq)?;
            let out = head.forward(&mut tape, &state.store, rep)?;
            let z = tape.scalar(out);
            Ok(match kind {
                AttributeKind::Continuous => std.inverse(z),
                AttributeKind::Binary => 1.0 / (1.0 + (-z).exp()),
            })
        })
        .collect()
}

fn dev_record(state: &TrainState, dev: &[AuthorExample], epoch: usize) -> Result<DevRecord> {
    let mut rec = DevRecord {
        epoch,
        step: state.meta.step,
        dev_ppl: None,
        dev_attr: None,
    };
    if dev.is_empty() {
        return Ok(rec);
    }
    let seqs: Vec<_> = dev.iter().map(|e| e.seq.clone()).collect();
    rec.dev_ppl = Some(perplexity(&state.model, &state.store, &seqs, state.mode())?);
    if state.head.is_some() && dev.iter().all(|e| e.raw.is_some()) {
        let preds = predict_attribute(state, dev)?;
        let golds: Vec<f64> = dev.iter().map(|e| e.raw.unwrap()).collect();
        rec.dev_attr = match state.meta.regime.kind() {
            Some(AttributeKind::Continuous) => pearson_r(&preds, &golds).ok(),
            _ => Some(
                preds.iter().zip(&golds).filter(|(p, g)| (**p >= 0.5) == (**g == 1.0)).count() as f64
                    / golds.len() as f64,
            ),
        };
    }
    Ok(rec)
}

/// Runs (or resumes, from `state.meta.step`) the epoch loop. Batch order
/// and dropout masks are functions of the seed and the step, so a resumed
/// run follows the uninterrupted trajectory exactly.
pub fn pretrain(
    state: &mut TrainState,
    train: &[AuthorExample],
    dev: &[AuthorExample],
    opts: &PretrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<PretrainOutcome> {
    state.meta.regime.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training authors"));
    }
    let bs = state.meta.regime.batch_size;
    let spe = steps_per_epoch(train.len(), bs);
    let total = spe * state.meta.regime.epochs as u64;
    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let mut out = PretrainOutcome {
        losses: Vec::new(),
        dev_log: Vec::new(),
        best: None,
    };
    let mut best_ppl = f64::INFINITY;
    while state.meta.step < stop {
        let epoch = (state.meta.step / spe) as usize;
        let order = epoch_order(state.meta.seed, epoch, train.len());
        let k = (state.meta.step % spe) as usize;
        let batch: Vec<&AuthorExample> = order[k * bs..((k + 1) * bs).min(train.len())].iter().map(|&i| &train[i]).collect();
        let log = train_step(state, &batch)?;
        observer.on_step(&log)?;
        out.losses.push(log);
        if state.meta.step.is_multiple_of(spe) {
            let rec = dev_record(state, dev, epoch + 1)?;
            // Without a dev split the latest epoch counts as best.
            let is_best = match rec.dev_ppl {
                Some(p) => p < best_ppl || out.best.is_none(),
                None => true,
            };
            if is_best {
                best_ppl = rec.dev_ppl.unwrap_or(best_ppl);
                out.best = Some((epoch + 1, state.store.clone()));
            }
            observer.on_epoch(&rec, state, is_best)?;
            log::info!(
                "epoch {} step {} dev ppl {:?} dev attr {:?}",
                rec.epoch,
                rec.step,
                rec.dev_ppl,
                rec.dev_attr
            );
            out.dev_log.push(rec);
        }
    }
    Ok(out)
}

/// Continues a group+individual checkpoint with a new regression attribute:
/// fresh attribute head, η reset to 0, fresh optimizer, step 0.
pub fn transfer_state(ck: Checkpoint, attribute: &str, standardizer: Standardizer, overrides: RegimeConfig) -> Result<TrainState> {
    use super::config::Regime;
    if ck.meta.regime.regime != Regime::GroupIndividual {
        return Err(Error::config(format!(
            "transfer needs a group_individual checkpoint, got {}",
            ck.meta.regime.regime.as_str()
        )));
    }
    let mut state = TrainState::from_checkpoint(ck)?;
    let regime = RegimeConfig {
        regime: Regime::GroupIndividual,
        attribute: Some(attribute.to_string()),
        attribute_kind: Some(AttributeKind::Continuous),
        ..overrides
    };
    regime.validate()?;
    let d = state.model.config().d_user();
    state.head = Some(Head::init(&mut state.store, ATTR_HEAD, d, 1, derive_seed(&[regime.seed, 0x7472])));
    state.etas = Some(LossVariances::init(&mut state.store));
    state.adam = Adam::new();
    state.meta.step = 0;
    state.meta.seed = regime.seed;
    state.meta.regime = regime;
    state.meta.standardizer = Some(standardizer);
    Ok(state)
}
