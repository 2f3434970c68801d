use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hulm_core::corpus::{Corpus, Standardizer};
use hulm_core::eval::MetricKind;
use hulm_core::training::{
    finetune, prepare_task, Checkpoint, FinetuneConfig, FinetuneRecord, NoObserver, TaskData, TaskSpec, TrainState,
};
use serde_json::json;

use super::evaluate::{evaluate_checkpoint, write_eval};
use super::{load_corpus, Outcome};
use crate::config::{config_error, load_toml, require, resolve, FinetuneFile, ResolvedFinetune};
use crate::rundir::{sha256_file, RunDir};
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// TOML file with paths and a `[finetune]` table (task, lr, epochs, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Pre-training checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long)]
    pub train: Option<PathBuf>,

    #[arg(long)]
    pub dev: Option<PathBuf>,

    /// Split scored with the selected model.
    #[arg(long)]
    pub test: Option<PathBuf>,

    /// Regress this author attribute (when no config names a task).
    #[arg(long)]
    pub attribute: Option<String>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub max_blocks: Option<usize>,

    /// Train only the task head.
    #[arg(long)]
    pub freeze_backbone: bool,

    /// Development and test metric.
    #[arg(long)]
    pub metric: Option<MetricKind>,

    #[arg(long)]
    pub bucket_by: Option<String>,

    #[command(flatten)]
    pub out: OutArgs,
}

fn resolve_args(args: &FinetuneArgs) -> Result<ResolvedFinetune> {
    let (file, base) = match &args.config {
        Some(p) => {
            let file: FinetuneFile = load_toml(p)?;
            (Some(file), p.parent().map(|b| b.to_path_buf()).unwrap_or_default())
        }
        None => (None, PathBuf::new()),
    };
    let from_file = |f: fn(&FinetuneFile) -> &Option<PathBuf>| {
        file.as_ref().and_then(|x| f(x).as_ref()).map(|p| resolve(&base, p))
    };
    let checkpoint = require(&args.checkpoint.clone().or(from_file(|f| &f.checkpoint)), "checkpoint")?;
    let train = require(&args.train.clone().or(from_file(|f| &f.train)), "train")?;
    let dev = args.dev.clone().or(from_file(|f| &f.dev));
    let test = args.test.clone().or(from_file(|f| &f.test));
    let mut cfg = match (&file, &args.attribute) {
        (_, Some(a)) => {
            let mut c = file.as_ref().map(|f| f.finetune.clone()).unwrap_or_else(|| {
                FinetuneConfig::new(TaskSpec::UserRegression { attribute: a.clone() })
            });
            c.task = TaskSpec::UserRegression { attribute: a.clone() };
            c
        }
        (Some(f), None) => f.finetune.clone(),
        (None, None) => return Err(config_error("finetune needs a task: --config or --attribute")),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(m) = args.max_blocks {
        cfg.max_blocks = m;
    }
    if args.freeze_backbone {
        cfg.freeze_backbone = true;
    }
    if let Some(m) = &args.metric {
        cfg.metric = Some(m.clone());
    }
    cfg.validate()?;
    Ok(ResolvedFinetune {
        checkpoint,
        train,
        dev,
        test,
        bucket_by: args.bucket_by.clone().or(file.and_then(|f| f.bucket_by)),
        finetune: cfg,
    })
}

pub fn run(args: FinetuneArgs) -> Result<Outcome> {
    let r = resolve_args(&args)?;
    let cfg = &r.finetune;
    let ck = Checkpoint::load(&r.checkpoint).with_context(|| format!("loading checkpoint {}", r.checkpoint.display()))?;
    if ck.meta.task.is_some() {
        return Err(config_error("the checkpoint is already fine-tuned"));
    }
    if cfg.max_blocks > ck.meta.model.max_blocks {
        return Err(config_error(format!(
            "max_blocks {} exceeds the checkpoint model's {}",
            cfg.max_blocks, ck.meta.model.max_blocks
        )));
    }

    let mut run = RunDir::create(&args.out)?;
    if let Some(p) = &args.config {
        run.input(p)?;
    }
    run.input(&r.checkpoint)?;
    let train = load_corpus(Some(&mut run), &r.train)?;
    let dev = match &r.dev {
        Some(p) => load_corpus(Some(&mut run), p)?,
        None => Corpus::default(),
    };
    let std = match &cfg.task {
        TaskSpec::UserRegression { attribute } => Standardizer::fit(&train, attribute)?,
        TaskSpec::DocClassification { .. } => Standardizer::IDENTITY,
    };
    // Blocking needs only the backbone; the pre-training state provides it.
    let probe = TrainState::from_checkpoint(ck.clone())?;
    let train_data = prepare_task(&train, &probe, &cfg.task, cfg.max_blocks, std)?;
    let dev_data = match (&cfg.task, dev.authors.is_empty()) {
        (TaskSpec::UserRegression { .. }, true) => TaskData::Users(Vec::new()),
        (TaskSpec::DocClassification { .. }, true) => TaskData::Docs(Vec::new()),
        _ => prepare_task(&dev, &probe, &cfg.task, cfg.max_blocks, std)?,
    };
    drop(probe);
    let out = finetune(ck, cfg, &train_data, &dev_data, std, &mut NoObserver)?;

    let mut csv = vec![FinetuneRecord::CSV_HEADER.to_string()];
    csv.extend(out.log.iter().map(FinetuneRecord::csv_row));
    run.write("finetune.csv", csv.join("\n") + "\n")?;
    out.model.checkpoint().save(run.path("model.ckpt"))?;
    run.record("model.ckpt")?;

    let mut text = format!(
        "finetune: best epoch {} of {} in {}\n",
        out.best_epoch,
        cfg.epochs,
        args.out.out.display()
    );
    if !dev_data.is_empty() {
        let set = out.model.prediction_set(&dev_data, &dev, r.bucket_by.as_deref())?;
        run.write("predictions/dev.tsv", set.to_text())?;
    }
    let mut report_json = serde_json::Value::Null;
    if let Some(test_path) = &r.test {
        let test = load_corpus(Some(&mut run), test_path)?;
        let eval = evaluate_checkpoint(
            out.model.checkpoint(),
            &test,
            sha256_file(test_path)?,
            None,
            r.bucket_by.as_deref(),
            Some(cfg.metric()),
            Some(cfg.max_blocks),
        )?;
        let report = write_eval(&mut run, &eval)?;
        text.push_str(&report.to_text());
        report_json = serde_json::to_value(&report)?;
    }
    run.finish("finetune", Some(cfg.seed), &r)?;
    Ok(Outcome {
        text,
        json: json!({
            "command": "finetune",
            "out": args.out.out,
            "best_epoch": out.best_epoch,
            "log": out.log,
            "report": report_json,
        }),
    })
}
