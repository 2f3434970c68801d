use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{escape_field, unescape_field};
use crate::error::{Error, Result};

pub const PREDICTIONS_HEADER: &str = "#hulm-predictions v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Author,
    Document,
}

impl Unit {
    fn as_str(self) -> &'static str {
        match self {
            Unit::Author => "author",
            Unit::Document => "document",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: f64,
    pub gold: f64,
    pub bucket: Option<String>,
}

/// Prediction/gold pairs for one task. Class labels are stored as integral
/// values; `n_classes` pins the label set when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub unit: Unit,
    pub task: String,
    pub n_classes: Option<usize>,
    pub rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(unit: Unit, task: impl Into<String>, n_classes: Option<usize>, rows: Vec<PredictionRow>) -> Result<Self> {
        let set = Self {
            unit,
            task: task.into(),
            n_classes,
            rows,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.is_empty() || self.task.contains(char::is_whitespace) {
            return Err(Error::data(format!("task name {:?} must be a non-empty word", self.task)));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data(format!("duplicate prediction id {:?}", r.id)));
            }
            if !r.gold.is_finite() || !r.prediction.is_finite() {
                return Err(Error::data(format!("non-finite value in row {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.prediction).collect()
    }

    pub fn golds(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gold).collect()
    }

    /// Header `#hulm-predictions v1 unit=.. task=.. [classes=..]`, then one
    /// `id \t prediction \t gold \t bucket` line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{PREDICTIONS_HEADER} unit={} task={}", self.unit.as_str(), self.task);
        if let Some(k) = self.n_classes {
            s.push_str(&format!(" classes={k}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                escape_field(&r.id),
                r.prediction,
                r.gold,
                r.bucket.as_deref().map(escape_field).unwrap_or_default()
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        let rest = header
            .strip_prefix(PREDICTIONS_HEADER)
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("expected header {PREDICTIONS_HEADER:?}"),
            })?;
        let (mut unit, mut task, mut n_classes) = (Unit::Author, "task".to_string(), None);
        for kv in rest.split_whitespace() {
            let bad = || Error::Parse {
                line: 1,
                msg: format!("bad header field {kv:?}"),
            };
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k {
                "unit" => {
                    unit = match v {
                        "author" => Unit::Author,
                        "document" => Unit::Document,
                        _ => return Err(bad()),
                    }
                }
                "task" => task = v.to_string(),
                "classes" => n_classes = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", f.len())));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| err(format!("bad {what} {s:?}")));
            rows.push(PredictionRow {
                id: unescape_field(f[0]).map_err(&err)?,
                prediction: num(f[1], "prediction")?,
                gold: num(f[2], "gold")?,
                bucket: if f[3].is_empty() {
                    None
                } else {
                    Some(unescape_field(f[3]).map_err(&err)?)
                },
            });
        }
        Self::new(unit, task, n_classes, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
