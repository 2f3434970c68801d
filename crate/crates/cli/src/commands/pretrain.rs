use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hulm_core::corpus::{Corpus, TokenizerSpec};
use hulm_core::objectives::CombineRule;
use hulm_core::training::{
    lr_search, pretrain, AuthorExample, Checkpoint, NoObserver, PretrainOptions, PretrainOutcome, Regime, TrainState,
};
use serde_json::json;

use super::{examples_for, fit_standardizer, load_corpus, Outcome, RunObserver};
use crate::config::{config_error, load_or_default, require, resolve, resolve_model, PretrainConfig, ResolvedPretrain};
use crate::rundir::RunDir;
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// TOML run configuration (`train`, `dev`, `preset`, `[model]`,
    /// `[regime]`, `[lr_search]`).
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub train: Option<PathBuf>,

    #[arg(long)]
    pub dev: Option<PathBuf>,

    /// none, group, individual or group_individual.
    #[arg(long)]
    pub regime: Option<Regime>,

    /// Author attribute for the auxiliary task (group, group_individual).
    #[arg(long)]
    pub attribute: Option<String>,

    /// sum_unweighted, hung_mtl, grit_halved or grit_unhalved.
    #[arg(long)]
    pub combine_rule: Option<CombineRule>,

    /// Blocks per author (raises the model's capacity when needed).
    #[arg(long)]
    pub max_blocks: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,

    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    #[command(flatten)]
    pub out: OutArgs,
}

/// Trains `state`, writing logs and checkpoints into `run`.
pub fn train_into(
    run: &mut RunDir,
    state: &mut TrainState,
    train: &[AuthorExample],
    dev: &[AuthorExample],
    max_steps: Option<u64>,
) -> Result<PretrainOutcome> {
    let mut obs = RunObserver::new(run)?;
    let out = pretrain(state, train, dev, &PretrainOptions { max_steps }, &mut obs)?;
    obs.finish(run, "loss.csv", "dev.csv")?;
    state.checkpoint().save(run.path("checkpoints/last.ckpt"))?;
    run.record("checkpoints/last.ckpt")?;
    Ok(out)
}

pub fn outcome_summary(command: &str, run_dir: &std::path::Path, state: &TrainState, out: &PretrainOutcome) -> Outcome {
    let best = out.best.as_ref().map(|(e, _)| *e);
    let best_ppl = best.and_then(|e| out.dev_log.iter().find(|r| r.epoch == e)).and_then(|r| r.dev_ppl);
    let mut text = format!(
        "{command}: regime {} trained to step {} in {}\n",
        state.regime().regime.as_str(),
        state.meta.step,
        run_dir.display()
    );
    if let (Some(e), Some(p)) = (best, best_ppl) {
        text.push_str(&format!("best epoch {e}: dev perplexity {p:.4}\n"));
    }
    Outcome {
        text,
        json: json!({
            "command": command,
            "out": run_dir,
            "regime": state.regime().regime.as_str(),
            "step": state.meta.step,
            "best_epoch": best,
            "dev": out.dev_log,
            "final": out.losses.last(),
        }),
    }
}

pub fn run(args: PretrainArgs) -> Result<Outcome> {
    let (file, base): (PretrainConfig, _) = load_or_default(args.config.as_deref())?;
    let train_path = args.train.clone().or(file.train.as_ref().map(|p| resolve(&base, p)));
    let train_path = require(&train_path, "train")?;
    let dev_path = args.dev.clone().or(file.dev.as_ref().map(|p| resolve(&base, p)));

    // Everything is validated before any data is read or directory touched.
    let resumed = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let mut state = TrainState::from_checkpoint(ck)?;
            if let Some(e) = args.epochs {
                state.meta.regime.epochs = e;
            }
            state.meta.regime.validate()?;
            Some(state)
        }
        None => None,
    };
    let (model, mut regime, tokenizer) = match &resumed {
        Some(s) => (s.model.config().clone(), s.regime().clone(), s.meta.tokenizer.clone()),
        None => {
            let mut model = resolve_model(&file.preset, &file.model)?;
            let mut regime = file.regime.clone();
            if let Some(r) = args.regime {
                if r != regime.regime {
                    // A different regime invalidates regime-specific file settings.
                    regime.attribute_kind = None;
                    regime.combine_rule = None;
                    if !r.needs_attribute() {
                        regime.attribute = None;
                    }
                }
                regime.regime = r;
            }
            if let Some(a) = &args.attribute {
                regime.attribute = Some(a.clone());
            }
            if let Some(c) = args.combine_rule {
                regime.combine_rule = Some(c);
            }
            if let Some(m) = args.max_blocks {
                regime.max_blocks = m;
                model.max_blocks = model.max_blocks.max(m);
            }
            if let Some(e) = args.epochs {
                regime.epochs = e;
            }
            if let Some(lr) = args.lr {
                regime.lr = lr;
            }
            if let Some(s) = args.seed {
                regime.seed = s;
            }
            if let Some(b) = args.batch_size {
                regime.batch_size = b;
            }
            regime.validate()?;
            model.validate()?;
            if regime.max_blocks > model.max_blocks {
                return Err(config_error(format!(
                    "regime max_blocks {} exceeds the model's {}",
                    regime.max_blocks, model.max_blocks
                )));
            }
            (model, regime, file.tokenizer.clone().unwrap_or(TokenizerSpec::Byte))
        }
    };
    if file.lr_search.is_some() && resumed.is_some() {
        return Err(config_error("lr_search cannot be combined with --resume"));
    }
    if file.lr_search.is_some() && dev_path.is_none() {
        return Err(config_error("lr_search needs a dev split"));
    }

    let mut run = RunDir::create(&args.out)?;
    if let Some(p) = &args.config {
        run.input(p)?;
    }
    if let Some(p) = &args.resume {
        run.input(p)?;
    }
    let train = load_corpus(Some(&mut run), &train_path)?;
    let dev = match &dev_path {
        Some(p) => load_corpus(Some(&mut run), p)?,
        None => Corpus::default(),
    };

    let mut state = match resumed {
        Some(s) => s,
        None => {
            let std = fit_standardizer(&regime, &train)?;
            if let Some(search) = &file.lr_search {
                let probe = TrainState::init(&model, regime.clone(), tokenizer.clone(), std)?;
                let tr = examples_for(&probe, &train, true)?;
                let dv = examples_for(&probe, &dev, true)?;
                let result = lr_search(&search.space(), false, |lr| {
                    let mut r = regime.clone();
                    r.lr = lr;
                    r.epochs = search.epochs.unwrap_or(r.epochs);
                    let mut s = TrainState::init(&model, r, tokenizer.clone(), std)?;
                    let out = pretrain(&mut s, &tr, &dv, &PretrainOptions::default(), &mut NoObserver)?;
                    Ok(out.dev_log.last().and_then(|d| d.dev_ppl).unwrap_or(f64::NAN))
                })?;
                let mut csv = String::from("lr,dev_ppl\n");
                for (lr, v) in &result.trials {
                    csv.push_str(&format!("{lr},{v}\n"));
                }
                run.write("lr_search.csv", csv)?;
                log::info!("lr search selected {}", result.best_lr);
                regime.lr = result.best_lr;
            }
            TrainState::init(&model, regime.clone(), tokenizer.clone(), std)?
        }
    };
    let train_ex = examples_for(&state, &train, true)?;
    let dev_ex = examples_for(&state, &dev, true)?;
    let out = train_into(&mut run, &mut state, &train_ex, &dev_ex, args.max_steps)?;

    let resolved = ResolvedPretrain {
        train: train_path,
        dev: dev_path,
        resume: args.resume.clone(),
        model,
        regime: state.regime().clone(),
        tokenizer,
        lr_search: file.lr_search.clone(),
    };
    let seed = state.meta.seed;
    run.finish("pretrain", Some(seed), &resolved)?;
    Ok(outcome_summary("pretrain", &args.out.out, &state, &out))
}
