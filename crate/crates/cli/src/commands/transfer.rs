use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hulm_core::corpus::{Corpus, Standardizer};
use hulm_core::training::{transfer_state, Checkpoint, Regime};

use super::pretrain::{outcome_summary, train_into};
use super::{examples_for, load_corpus, Outcome};
use crate::config::{config_error, load_or_default, require, resolve, ResolvedTransfer, TransferFile};
use crate::rundir::RunDir;
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// TOML file with `checkpoint`, `train`, `dev` and a `[regime]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// A group_individual pre-training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long)]
    pub train: Option<PathBuf>,

    #[arg(long)]
    pub dev: Option<PathBuf>,

    /// The new continuous attribute to regress.
    #[arg(long)]
    pub attribute: Option<String>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(args: TransferArgs) -> Result<Outcome> {
    let (file, base): (TransferFile, _) = load_or_default(args.config.as_deref())?;
    let pick = |flag: &Option<PathBuf>, f: &Option<PathBuf>| flag.clone().or(f.as_ref().map(|p| resolve(&base, p)));
    let ck_path = require(&pick(&args.checkpoint, &file.checkpoint), "checkpoint")?;
    let train_path = require(&pick(&args.train, &file.train), "train")?;
    let dev_path = pick(&args.dev, &file.dev);

    let mut regime = file.regime.clone();
    if regime.regime != Regime::GroupIndividual {
        return Err(config_error("transfer continues with the group_individual regime"));
    }
    if let Some(a) = &args.attribute {
        regime.attribute = Some(a.clone());
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
    let attribute = regime
        .attribute
        .clone()
        .ok_or_else(|| config_error("transfer needs --attribute"))?;
    regime.validate()?;
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    if ck.meta.regime.regime != Regime::GroupIndividual || ck.meta.task.is_some() {
        return Err(config_error(format!(
            "transfer needs a group_individual pre-training checkpoint, got {}",
            ck.meta.regime.regime.as_str()
        )));
    }
    if regime.max_blocks > ck.meta.model.max_blocks {
        return Err(config_error(format!(
            "max_blocks {} exceeds the checkpoint model's {}",
            regime.max_blocks, ck.meta.model.max_blocks
        )));
    }

    let mut run = RunDir::create(&args.out)?;
    if let Some(p) = &args.config {
        run.input(p)?;
    }
    run.input(&ck_path)?;
    let train = load_corpus(Some(&mut run), &train_path)?;
    let dev = match &dev_path {
        Some(p) => load_corpus(Some(&mut run), p)?,
        None => Corpus::default(),
    };
    let std = Standardizer::fit(&train, &attribute)?;
    let mut state = transfer_state(ck, &attribute, std, regime)?;
    let train_ex = examples_for(&state, &train, true)?;
    let dev_ex = examples_for(&state, &dev, true)?;
    let out = train_into(&mut run, &mut state, &train_ex, &dev_ex, None)?;

    let resolved = ResolvedTransfer {
        checkpoint: ck_path,
        train: train_path,
        dev: dev_path,
        regime: state.regime().clone(),
    };
    run.finish("transfer", Some(state.meta.seed), &resolved)?;
    Ok(outcome_summary("transfer", &args.out.out, &state, &out))
}
