//! Author records, the corpus file format, block construction and the
//! synthetic generator.

mod blocks;
mod record;
pub mod synthetic;
mod tokenizer;

pub use blocks::{build_blocks, Block, BlockSequence, DocSpan};
pub use record::{escape_field, unescape_field, AuthorRecord, Corpus, Document, CORPUS_HEADER};
pub use synthetic::{generate_synthetic, split_by_author, SyntheticSpec};
pub use tokenizer::{ByteTokenizer, Tokenizer, TokenizerSpec, VocabTokenizer};

use crate::error::{Error, Result};

/// z-scoring with statistics fitted on one split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Population statistics of `attribute` over `corpus`. A constant
    /// attribute gets unit scale.
    pub fn fit(corpus: &Corpus, attribute: &str) -> Result<Self> {
        let vals = corpus
            .authors
            .iter()
            .map(|a| {
                a.attribute(attribute)
                    .ok_or_else(|| Error::data(format!("author {:?} lacks attribute {attribute:?}", a.author_id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.is_empty() {
            return Err(Error::data(format!("no authors to fit attribute {attribute:?}")));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}
