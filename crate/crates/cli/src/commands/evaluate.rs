use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use hulm_core::corpus::Corpus;
use hulm_core::eval::{
    compare_report, lm_prediction_set, BucketScheme, MetricKind, PredictionRow, PredictionSet, Report, RunEval, TaskEval,
    Unit,
};
use hulm_core::training::{predict_attribute, prepare_task, AttributeKind, Checkpoint, TaskModel, TrainState};
use serde_json::json;

use super::{examples_for, load_corpus, Outcome};
use crate::config::config_error;
use crate::rundir::{sha256_bytes, sha256_file, RunDir};
use crate::OutArgs;

pub const EVAL_FILE: &str = "eval.json";
pub const LM_TASK: &str = "lm";

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint to score on `--data`.
    #[arg(long, requires = "data", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,

    /// Corpus split to evaluate on.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Prediction files to score directly (repeatable).
    #[arg(long = "predictions", num_args = 1..)]
    pub predictions: Vec<PathBuf>,

    /// Run label in reports; defaults to the checkpoint's regime.
    #[arg(long)]
    pub name: Option<String>,

    /// Author attribute whose age bucket annotates user-level predictions.
    #[arg(long)]
    pub bucket_by: Option<String>,

    /// Metric for the attribute or task predictions (e.g. pearson,
    /// disattenuated:0.7:0.8, f1_macro).
    #[arg(long)]
    pub metric: Option<MetricKind>,

    /// Blocks per author; defaults to what the checkpoint was trained with.
    #[arg(long)]
    pub max_blocks: Option<usize>,

    #[command(flatten)]
    pub out: OutArgs,
}

fn check_metric(metric: &MetricKind, classification: bool) -> Result<()> {
    if metric.is_classification() != classification || *metric == MetricKind::Perplexity {
        return Err(config_error(format!("metric {} does not fit this task", metric.name())));
    }
    Ok(())
}

fn buckets_for(corpus: &Corpus, ids: &[String], attr: Option<&str>) -> Result<Vec<Option<String>>> {
    let scheme = BucketScheme::age();
    ids.iter()
        .map(|id| match attr {
            None => Ok(None),
            Some(a) => corpus
                .author(id)
                .and_then(|r| r.attribute(a))
                .map(|v| Some(scheme.name_of(v).to_string()))
                .ok_or_else(|| hulm_core::Error::Data(format!("author {id:?} lacks {a:?}")).into()),
        })
        .collect()
}

/// Scores a checkpoint on one corpus split. Pre-training checkpoints give a
/// perplexity task plus, when the split carries the attribute, the
/// attribute head's predictions; fine-tuned checkpoints give their task.
pub fn evaluate_checkpoint(
    ck: Checkpoint,
    corpus: &Corpus,
    split_hash: String,
    name: Option<String>,
    bucket_by: Option<&str>,
    metric: Option<MetricKind>,
    max_blocks: Option<usize>,
) -> Result<RunEval> {
    let run = name.unwrap_or_else(|| ck.meta.regime.regime.as_str().to_string());
    let mut tasks = Vec::new();
    if ck.meta.task.is_some() {
        let blocks = max_blocks.or(ck.meta.task_max_blocks).unwrap_or(ck.meta.regime.max_blocks);
        let tm = TaskModel::from_checkpoint(ck)?;
        let data = prepare_task(corpus, &tm.state, &tm.task, blocks, tm.standardizer)?;
        let set = tm.prediction_set(&data, corpus, bucket_by)?;
        let metric = metric.unwrap_or_else(|| tm.task.default_metric());
        check_metric(&metric, set.n_classes.is_some())?;
        tasks.push(TaskEval {
            task: set.task.clone(),
            metric,
            sets: vec![set],
        });
        return Ok(RunEval { run, split_hash, tasks });
    }

    let mut state = TrainState::from_checkpoint(ck)?;
    if let Some(m) = max_blocks {
        if m > state.model.config().max_blocks {
            return Err(config_error(format!("max_blocks {m} exceeds the model's {}", state.model.config().max_blocks)));
        }
        state.meta.regime.max_blocks = m;
    }
    let attr = state.regime().attribute.clone().filter(|a| corpus.has_attribute(a));
    let examples = examples_for(&state, corpus, attr.is_some())?;
    let seqs: Vec<_> = examples.iter().map(|e| e.seq.clone()).collect();
    let lm = lm_prediction_set(&state.model, &state.store, &seqs, state.mode(), LM_TASK)?;
    tasks.push(TaskEval {
        task: LM_TASK.into(),
        metric: MetricKind::Perplexity,
        sets: vec![lm],
    });
    if let Some(attr) = attr {
        let kind = state.regime().kind().expect("attribute regimes have a kind");
        let probs = predict_attribute(&state, &examples)?;
        let ids: Vec<String> = examples.iter().map(|e| e.seq.author_id.clone()).collect();
        let buckets = buckets_for(corpus, &ids, bucket_by)?;
        let binary = kind == AttributeKind::Binary;
        let rows = examples
            .iter()
            .zip(probs)
            .zip(ids.into_iter().zip(buckets))
            .map(|((e, p), (id, bucket))| PredictionRow {
                id,
                prediction: if binary { f64::from(u8::from(p >= 0.5)) } else { p },
                gold: e.raw.expect("targets requested"),
                bucket,
            })
            .collect();
        let set = PredictionSet::new(Unit::Author, attr.clone(), binary.then_some(2), rows)?;
        let metric = metric.unwrap_or(if binary { MetricKind::Accuracy } else { MetricKind::Pearson });
        check_metric(&metric, binary)?;
        tasks.push(TaskEval {
            task: attr,
            metric,
            sets: vec![set],
        });
    }
    Ok(RunEval { run, split_hash, tasks })
}

fn file_stem(task: &str, k: usize, n: usize) -> String {
    if n == 1 {
        format!("predictions/{task}.tsv")
    } else {
        format!("predictions/{task}-{k}.tsv")
    }
}

/// Writes prediction files, `eval.json` and the single-run report.
pub fn write_eval(run: &mut RunDir, eval: &RunEval) -> Result<Report> {
    for t in &eval.tasks {
        for (k, s) in t.sets.iter().enumerate() {
            run.write(&file_stem(&t.task, k, t.sets.len()), s.to_text())?;
        }
    }
    run.write(EVAL_FILE, serde_json::to_string_pretty(eval)? + "\n")?;
    let report = compare_report(std::slice::from_ref(eval))?;
    run.write("report.txt", report.to_text())?;
    run.write("report.json", report.to_json()? + "\n")?;
    Ok(report)
}

/// Comparability key for prediction files scored without a corpus.
fn gold_hash(sets: &[PredictionSet]) -> String {
    let mut lines: Vec<String> = sets
        .iter()
        .flat_map(|s| s.rows.iter().map(move |r| format!("{}\t{}\t{}", s.task, r.id, r.gold)))
        .collect();
    lines.sort();
    sha256_bytes(lines.join("\n").as_bytes())
}

fn default_metric(set: &PredictionSet) -> MetricKind {
    if set.task == LM_TASK {
        MetricKind::Perplexity
    } else if set.n_classes.is_some() {
        MetricKind::F1Weighted
    } else {
        MetricKind::Pearson
    }
}

fn external_eval(args: &EvaluateArgs, run: &mut RunDir) -> Result<RunEval> {
    let mut by_task: BTreeMap<String, Vec<PredictionSet>> = BTreeMap::new();
    for p in &args.predictions {
        let set = PredictionSet::load(p).with_context(|| format!("reading predictions {}", p.display()))?;
        run.input(p)?;
        by_task.entry(set.task.clone()).or_default().push(set);
    }
    let all: Vec<PredictionSet> = by_task.values().flatten().cloned().collect();
    let split_hash = match &args.data {
        Some(d) => {
            run.input(d)?;
            sha256_file(d)?
        }
        None => gold_hash(&all),
    };
    let mut tasks = Vec::new();
    for (task, sets) in by_task {
        let metric = args.metric.clone().unwrap_or_else(|| default_metric(&sets[0]));
        if metric != MetricKind::Perplexity {
            check_metric(&metric, sets[0].n_classes.is_some())?;
        }
        tasks.push(TaskEval { task, metric, sets });
    }
    Ok(RunEval {
        run: args.name.clone().unwrap_or_else(|| "external".into()),
        split_hash,
        tasks,
    })
}

#[derive(serde::Serialize)]
struct ResolvedEvaluate<'a> {
    checkpoint: Option<&'a Path>,
    data: Option<&'a Path>,
    predictions: &'a [PathBuf],
    name: &'a str,
    bucket_by: Option<&'a str>,
    metric: Option<&'a MetricKind>,
    max_blocks: Option<usize>,
}

pub fn run(args: EvaluateArgs) -> Result<Outcome> {
    if args.checkpoint.is_none() && args.predictions.is_empty() {
        return Err(config_error("evaluate needs --checkpoint with --data, or --predictions"));
    }
    let ck = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let mut run = RunDir::create(&args.out)?;
    let eval = match ck {
        Some(ck) => {
            run.input(args.checkpoint.as_deref().unwrap())?;
            let data = args.data.as_deref().expect("clap requires --data");
            let corpus = load_corpus(Some(&mut run), data)?;
            evaluate_checkpoint(
                ck,
                &corpus,
                sha256_file(data)?,
                args.name.clone(),
                args.bucket_by.as_deref(),
                args.metric.clone(),
                args.max_blocks,
            )?
        }
        None => external_eval(&args, &mut run)?,
    };
    let report = write_eval(&mut run, &eval)?;
    let resolved = ResolvedEvaluate {
        checkpoint: args.checkpoint.as_deref(),
        data: args.data.as_deref(),
        predictions: &args.predictions,
        name: &eval.run,
        bucket_by: args.bucket_by.as_deref(),
        metric: args.metric.as_ref(),
        max_blocks: args.max_blocks,
    };
    run.finish("evaluate", None, &resolved)?;
    Ok(Outcome {
        text: report.to_text(),
        json: json!({ "command": "evaluate", "out": args.out.out, "report": report }),
    })
}
