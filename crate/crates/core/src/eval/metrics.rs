use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson_r(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_pair("pearson_r", preds, golds)?;
    if preds.len() < 2 {
        return Err(Error::UndefinedMetric(format!("pearson r needs n >= 2, got {}", preds.len())));
    }
    let (mp, mg) = (mean(preds), mean(golds));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson r with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `r / sqrt(rel_pred · rel_gold)` clipped to `[-1, 1]`; the flag reports
/// whether clipping happened (a warning is logged too).
pub fn disattenuate(r: f64, rel_pred: f64, rel_gold: f64) -> Result<(f64, bool)> {
    for rel in [rel_pred, rel_gold] {
        if !(rel > 0.0 && rel <= 1.0) {
            return Err(Error::config(format!("reliability {rel} outside (0, 1]")));
        }
    }
    let raw = r / (rel_pred * rel_gold).sqrt();
    if raw.abs() > 1.0 {
        log::warn!("disattenuated r {raw:.4} clipped to [-1, 1]");
        Ok((raw.clamp(-1.0, 1.0), true))
    } else {
        Ok((raw, false))
    }
}

pub fn disattenuated_r(preds: &[f64], golds: &[f64], rel_pred: f64, rel_gold: f64) -> Result<f64> {
    let r = pearson_r(preds, golds)?;
    disattenuate(r, rel_pred, rel_gold).map(|(v, _)| v)
}

pub fn mse(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_pair("mse", preds, golds)?;
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("mse of an empty set".into()));
    }
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    /// Support-weighted mean of per-class F1.
    Weighted,
    /// Unweighted mean over all classes; classes never seen score 0.
    Macro,
}

/// F1 over class indices `0..n_classes`.
pub fn f1_score(preds: &[usize], golds: &[usize], n_classes: usize, average: Average) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension {
            op: "f1",
            lhs: vec![preds.len()],
            rhs: vec![golds.len()],
        });
    }
    if preds.is_empty() || n_classes == 0 {
        return Err(Error::UndefinedMetric("f1 of an empty set".into()));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::data(format!("label {bad} outside the {n_classes} known classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(match average {
        Average::Macro => per_class.iter().sum::<f64>() / n_classes as f64,
        Average::Weighted => {
            let support: Vec<usize> = (0..n_classes).map(|c| tp[c] + fn_[c]).collect();
            let total: usize = support.iter().sum();
            per_class.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
        }
    })
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy needs aligned, non-empty sets".into()));
    }
    Ok(preds.iter().zip(golds).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

/// Unweighted mean of per-target weighted F1 (the stance aggregate).
pub fn stance_aggregate(per_target: &[f64]) -> Result<f64> {
    if per_target.is_empty() {
        return Err(Error::UndefinedMetric("no stance targets".into()));
    }
    Ok(per_target.iter().sum::<f64>() / per_target.len() as f64)
}

/// The task metric a prediction set is scored with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetricKind {
    Pearson,
    Disattenuated { rel_pred: f64, rel_gold: f64 },
    Mse,
    F1Weighted,
    F1Macro,
    Accuracy,
    /// Language-model perplexity over per-author rows whose prediction is
    /// the summed NLL and whose gold is the predicted-token count.
    Perplexity,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pearson => "pearson",
            Self::Disattenuated { .. } => "disattenuated",
            Self::Mse => "mse",
            Self::F1Weighted => "f1_weighted",
            Self::F1Macro => "f1_macro",
            Self::Accuracy => "accuracy",
            Self::Perplexity => "perplexity",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, Self::Mse | Self::Perplexity)
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::F1Weighted | Self::F1Macro | Self::Accuracy)
    }

    /// Scores raw values; class metrics read them as class indices and infer
    /// the class count from the data when `n_classes` is `None`.
    pub fn evaluate(&self, preds: &[f64], golds: &[f64], n_classes: Option<usize>) -> Result<f64> {
        match self {
            Self::Pearson => pearson_r(preds, golds),
            Self::Disattenuated { rel_pred, rel_gold } => disattenuated_r(preds, golds, *rel_pred, *rel_gold),
            Self::Mse => mse(preds, golds),
            Self::Perplexity => pooled_perplexity(preds, golds),
            Self::F1Weighted | Self::F1Macro | Self::Accuracy => {
                let p = class_indices(preds)?;
                let g = class_indices(golds)?;
                let k = n_classes.unwrap_or_else(|| p.iter().chain(&g).max().map_or(0, |m| m + 1));
                match self {
                    Self::F1Weighted => f1_score(&p, &g, k, Average::Weighted),
                    Self::F1Macro => f1_score(&p, &g, k, Average::Macro),
                    _ => accuracy(&p, &g),
                }
            }
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    /// `pearson`, `mse`, `f1_weighted`, `f1_macro`, `accuracy`, `perplexity`, or
    /// `disattenuated:REL_PRED:REL_GOLD`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pearson" => Self::Pearson,
            "mse" => Self::Mse,
            "f1_weighted" => Self::F1Weighted,
            "f1_macro" => Self::F1Macro,
            "accuracy" => Self::Accuracy,
            "perplexity" => Self::Perplexity,
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                match parts.as_slice() {
                    ["disattenuated", a, b] => {
                        let num = |x: &str| x.parse::<f64>().map_err(|_| Error::config(format!("bad reliability {x:?}")));
                        Self::Disattenuated {
                            rel_pred: num(a)?,
                            rel_gold: num(b)?,
                        }
                    }
                    _ => return Err(Error::config(format!("unknown metric {other:?}"))),
                }
            }
        })
    }
}

/// `exp(Σ nll / Σ count)`.
pub fn pooled_perplexity(nll: &[f64], counts: &[f64]) -> Result<f64> {
    if nll.len() != counts.len() {
        return Err(Error::Dimension {
            op: "perplexity",
            lhs: vec![nll.len()],
            rhs: vec![counts.len()],
        });
    }
    if counts.iter().any(|&c| !(c >= 0.0)) || nll.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::data("perplexity rows need non-negative NLL and token counts"));
    }
    let n: f64 = counts.iter().sum();
    if n == 0.0 {
        return Err(Error::UndefinedMetric("no predicted tokens".into()));
    }
    Ok((nll.iter().sum::<f64>() / n).exp())
}

/// Reads class labels stored as non-negative integral floats.
pub fn class_indices(values: &[f64]) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::data(format!("{v} is not a class index")))
            }
        })
        .collect()
}
