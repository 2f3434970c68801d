use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::buckets::{bucketed_metric, mean_error_disparity, BucketScheme, BucketScore};
use super::metrics::{class_indices, stance_aggregate, MetricKind};
use super::predictions::PredictionSet;
use super::significance::{mcnemar_test, paired_t_test};
use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// One task of one run. Several prediction sets (e.g. one per stance
/// target) are scored separately and averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub metric: MetricKind,
    pub sets: Vec<PredictionSet>,
}

impl TaskEval {
    pub fn score(&self) -> Result<f64> {
        let per: Vec<f64> = self
            .sets
            .iter()
            .map(|s| self.metric.evaluate(&s.predictions(), &s.golds(), s.n_classes))
            .collect::<Result<_>>()?;
        stance_aggregate(&per)
    }

    /// Per-item quantity the significance tests pair on: squared error for
    /// regression, per-token NLL for perplexity, correctness for
    /// classification.
    fn items(&self) -> Vec<(String, f64, bool)> {
        let mut out = Vec::new();
        for (k, s) in self.sets.iter().enumerate() {
            for r in &s.rows {
                let value = match self.metric {
                    MetricKind::Perplexity => r.prediction / r.gold.max(1.0),
                    _ => (r.prediction - r.gold).powi(2),
                };
                out.push((format!("{k}/{}", r.id), value, r.prediction == r.gold));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub run: String,
    /// Digest of the evaluation split; runs are only comparable when equal.
    pub split_hash: String,
    pub tasks: Vec<TaskEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub task: String,
    pub best: String,
    pub other: String,
    pub test: String,
    pub p: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub task: String,
    pub run: String,
    pub scores: Vec<BucketScore>,
    pub med: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split_hash: String,
    pub tasks: Vec<String>,
    pub metrics: Vec<String>,
    pub rows: Vec<Row>,
    pub significance: Vec<Significance>,
    pub buckets: Vec<BucketTable>,
}

fn bucket_order(keys: &[String]) -> Vec<String> {
    let age = BucketScheme::age().names;
    if keys.iter().all(|k| age.contains(k)) {
        return age.into_iter().filter(|n| keys.contains(n)).collect();
    }
    let mut o: Vec<String> = keys.to_vec();
    o.sort();
    o.dedup();
    o
}

/// Builds the comparison table. All runs must share the split hash; tasks
/// are the union over runs, in first-seen order.
pub fn compare_report(runs: &[RunEval]) -> Result<Report> {
    let first = runs.first().ok_or_else(|| Error::contract("nothing to compare"))?;
    if let Some(r) = runs.iter().find(|r| r.split_hash != first.split_hash) {
        return Err(Error::contract(format!(
            "run {:?} was evaluated on split {} but {:?} on {}",
            r.run, r.split_hash, first.run, first.split_hash
        )));
    }
    let mut tasks: Vec<(String, MetricKind)> = Vec::new();
    for t in runs.iter().flat_map(|r| &r.tasks) {
        match tasks.iter().find(|(n, _)| *n == t.task) {
            None => tasks.push((t.task.clone(), t.metric.clone())),
            Some((_, m)) if *m != t.metric => {
                return Err(Error::contract(format!("task {:?} scored with different metrics", t.task)))
            }
            _ => {}
        }
    }
    let lookup: Vec<HashMap<&str, &TaskEval>> = runs
        .iter()
        .map(|r| r.tasks.iter().map(|t| (t.task.as_str(), t)).collect())
        .collect();

    let mut values = vec![vec![None; tasks.len()]; runs.len()];
    for (i, _) in runs.iter().enumerate() {
        for (j, (name, _)) in tasks.iter().enumerate() {
            if let Some(t) = lookup[i].get(name.as_str()) {
                values[i][j] = match t.score() {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(why)) => {
                        log::warn!("{}: {name} undefined: {why}", runs[i].run);
                        None
                    }
                    Err(e) => return Err(e),
                };
            }
        }
    }

    let mut best_idx = vec![None; tasks.len()];
    let mut rows: Vec<Row> = runs
        .iter()
        .map(|r| Row {
            run: r.run.clone(),
            cells: Vec::new(),
        })
        .collect();
    for (j, (_, metric)) in tasks.iter().enumerate() {
        let better = |a: f64, b: f64| if metric.higher_is_better() { a > b } else { a < b };
        let mut best: Option<f64> = None;
        for v in values.iter().filter_map(|row| row[j]) {
            if best.is_none_or(|b| better(v, b)) {
                best = Some(v);
            }
        }
        best_idx[j] = values.iter().position(|row| row[j].is_some() && row[j] == best);
        for (i, row) in rows.iter_mut().enumerate() {
            row.cells.push(Cell {
                value: values[i][j],
                best: values[i][j].is_some() && values[i][j] == best,
            });
        }
    }

    let mut significance = Vec::new();
    for (j, (name, metric)) in tasks.iter().enumerate() {
        let Some(b) = best_idx[j] else { continue };
        let best_items = lookup[b][name.as_str()].items();
        for (i, r) in runs.iter().enumerate() {
            let Some(other) = lookup[i].get(name.as_str()).filter(|_| i != b) else {
                continue;
            };
            let other_items = other.items();
            let ids_a: Vec<&String> = best_items.iter().map(|x| &x.0).collect();
            let ids_b: Vec<&String> = other_items.iter().map(|x| &x.0).collect();
            if ids_a != ids_b {
                return Err(Error::contract(format!(
                    "task {name:?}: runs {:?} and {:?} scored different items",
                    runs[b].run, r.run
                )));
            }
            let (test, p) = if metric.is_classification() {
                for s in &other.sets {
                    class_indices(&s.predictions())?;
                }
                let a: Vec<bool> = best_items.iter().map(|x| x.2).collect();
                let c: Vec<bool> = other_items.iter().map(|x| x.2).collect();
                ("mcnemar", mcnemar_test(&a, &c)?.p_exact)
            } else {
                let a: Vec<f64> = best_items.iter().map(|x| x.1).collect();
                let c: Vec<f64> = other_items.iter().map(|x| x.1).collect();
                if a.len() < 2 {
                    continue;
                }
                ("paired_t", paired_t_test(&a, &c)?.p)
            };
            significance.push(Significance {
                task: name.clone(),
                best: runs[b].run.clone(),
                other: r.run.clone(),
                test: test.into(),
                p,
                significant: p < SIGNIFICANCE_LEVEL,
            });
        }
    }

    let mut buckets = Vec::new();
    for (name, metric) in &tasks {
        if metric.is_classification() || *metric == MetricKind::Perplexity {
            continue;
        }
        for (i, r) in runs.iter().enumerate() {
            let Some(t) = lookup[i].get(name.as_str()) else { continue };
            let rows: Vec<_> = t.sets.iter().flat_map(|s| &s.rows).collect();
            if rows.is_empty() || rows.iter().any(|x| x.bucket.is_none()) {
                continue;
            }
            let keys: Vec<String> = rows.iter().map(|x| x.bucket.clone().unwrap()).collect();
            let p: Vec<f64> = rows.iter().map(|x| x.prediction).collect();
            let g: Vec<f64> = rows.iter().map(|x| x.gold).collect();
            let scores = bucketed_metric(&p, &g, &keys, &bucket_order(&keys), metric)?;
            let defined: Vec<f64> = scores.iter().filter_map(|s| s.value).collect();
            let med = mean_error_disparity(&defined).ok();
            buckets.push(BucketTable {
                task: name.clone(),
                run: r.run.clone(),
                scores,
                med,
            });
        }
    }

    Ok(Report {
        split_hash: first.split_hash.clone(),
        tasks: tasks.iter().map(|t| t.0.clone()).collect(),
        metrics: tasks.iter().map(|t| t.1.name().to_string()).collect(),
        rows,
        significance,
        buckets,
    })
}

impl Report {
    /// Plain-text rendering: `*` marks best in column; `†` marks a best
    /// cell significantly better than every other run.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let runw = self.rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        let headers: Vec<String> = self.tasks.iter().zip(&self.metrics).map(|(t, m)| format!("{t} ({m})")).collect();
        let colw: Vec<usize> = headers.iter().map(|h| h.len().max(10)).collect();
        let _ = write!(s, "{:runw$}", "run");
        for (h, w) in headers.iter().zip(&colw) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:runw$}", row.run);
            for (j, (c, w)) in row.cells.iter().zip(&colw).enumerate() {
                let mut cell = c.value.map_or("-".to_string(), |v| format!("{v:.4}"));
                if c.best {
                    cell.push('*');
                    let claims: Vec<&Significance> = self
                        .significance
                        .iter()
                        .filter(|x| x.task == self.tasks[j] && x.best == row.run)
                        .collect();
                    if !claims.is_empty() && claims.iter().all(|x| x.significant) {
                        cell.push('†');
                    }
                }
                let _ = write!(s, "  {cell:>w$}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n* best in column; † p < {SIGNIFICANCE_LEVEL} against every other run");
        if !self.significance.is_empty() {
            let _ = writeln!(s, "\nsignificance");
            for x in &self.significance {
                let _ = writeln!(s, "  {}: {} vs {} ({}) p = {:.4e}", x.task, x.best, x.other, x.test, x.p);
            }
        }
        if !self.buckets.is_empty() {
            let _ = writeln!(s, "\nbucketed analysis");
            for b in &self.buckets {
                let cells: Vec<String> = b
                    .scores
                    .iter()
                    .map(|x| format!("{}={} (n={})", x.bucket, x.value.map_or("-".into(), |v| format!("{v:.3}")), x.n))
                    .collect();
                let med = b.med.map_or("-".into(), |m| format!("{m:.3}"));
                let _ = writeln!(s, "  {} / {}: {}  MED={med}", b.task, b.run, cells.join("  "));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }
}
