use serde::{Deserialize, Serialize};

use super::metrics::MetricKind;
use crate::error::{Error, Result};

/// Named, ordered buckets over a numeric attribute. Bucket `i` covers
/// `[boundaries[i-1], boundaries[i])`, with open ends at both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScheme {
    pub names: Vec<String>,
    pub boundaries: Vec<f64>,
}

impl BucketScheme {
    pub fn new(names: Vec<String>, boundaries: Vec<f64>) -> Result<Self> {
        if names.len() != boundaries.len() + 1 {
            return Err(Error::config(format!(
                "{} bucket names need {} boundaries, got {}",
                names.len(),
                names.len().saturating_sub(1),
                boundaries.len()
            )));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) || boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("bucket boundaries must be finite and strictly increasing"));
        }
        Ok(Self { names, boundaries })
    }

    /// `<18, 18-21, 21-30, 30-45, >45`.
    pub fn age() -> Self {
        Self {
            names: ["<18", "18-21", "21-30", "30-45", ">45"].map(String::from).to_vec(),
            boundaries: vec![18.0, 21.0, 30.0, 45.0],
        }
    }

    pub fn index_of(&self, x: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= x)
    }

    pub fn name_of(&self, x: f64) -> &str {
        &self.names[self.index_of(x)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub bucket: String,
    pub n: usize,
    /// `None` when the metric is undefined inside the bucket.
    pub value: Option<f64>,
}

/// Evaluates `metric` independently inside each bucket of `order`. Every
/// row's key must appear in `order`. Undefined buckets are kept with
/// `value: None` and a warning.
pub fn bucketed_metric(
    preds: &[f64],
    golds: &[f64],
    buckets: &[String],
    order: &[String],
    metric: &MetricKind,
) -> Result<Vec<BucketScore>> {
    if preds.len() != golds.len() || preds.len() != buckets.len() {
        return Err(Error::Dimension {
            op: "bucketed_metric",
            lhs: vec![preds.len(), golds.len()],
            rhs: vec![buckets.len()],
        });
    }
    if let Some(b) = buckets.iter().find(|b| !order.contains(b)) {
        return Err(Error::data(format!("row bucket {b:?} is not in the bucket scheme")));
    }
    order
        .iter()
        .map(|name| {
            let (p, g): (Vec<f64>, Vec<f64>) = buckets
                .iter()
                .zip(preds.iter().zip(golds))
                .filter(|(b, _)| *b == name)
                .map(|(_, (p, g))| (*p, *g))
                .unzip();
            let value = match metric.evaluate(&p, &g, None) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(why)) => {
                    log::warn!("bucket {name:?} excluded: {why}");
                    None
                }
                Err(e) => return Err(e),
            };
            Ok(BucketScore {
                bucket: name.clone(),
                n: p.len(),
                value,
            })
        })
        .collect()
}

/// Mean absolute difference over all unordered pairs of bucket scores.
pub fn mean_error_disparity(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::contract(format!("error disparity needs >= 2 buckets, got {}", scores.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            total += (scores[i] - scores[j]).abs();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
