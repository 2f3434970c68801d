use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::AttributeKind;
use crate::corpus::{build_blocks, AuthorRecord, BlockSequence, Corpus, Standardizer, Tokenizer};
use crate::error::{Error, Result};
use crate::human_context::{average_user_states, masked_mean_rows, AuthorPass, PassMode};
use crate::tensor::{Tape, Var};

/// One author, blocked, with an optional (standardized) attribute target.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthorExample {
    pub seq: BlockSequence,
    pub target: Option<f64>,
    /// The attribute in its original units.
    pub raw: Option<f64>,
}

/// What an author example should carry as its target.
#[derive(Clone, Copy, Debug)]
pub struct TargetSpec<'a> {
    pub attribute: &'a str,
    pub kind: AttributeKind,
    pub standardizer: Standardizer,
}

/// Blocks every author that has at least one document.
pub fn author_examples(
    corpus: &Corpus,
    tokenizer: &dyn Tokenizer,
    block_len: usize,
    max_blocks: usize,
    target: Option<TargetSpec<'_>>,
) -> Result<Vec<AuthorExample>> {
    corpus
        .authors
        .par_iter()
        .filter(|a| !a.documents.is_empty())
        .map(|a| {
            let seq = build_blocks(a, tokenizer, block_len, max_blocks, None)?;
            let (target, raw) = match target {
                None => (None, None),
                Some(t) => {
                    let raw = a.attribute(t.attribute).ok_or_else(|| {
                        Error::data(format!("author {:?} lacks attribute {:?}", a.author_id, t.attribute))
                    })?;
                    let y = match t.kind {
                        AttributeKind::Continuous => t.standardizer.transform(raw),
                        AttributeKind::Binary if raw == 0.0 || raw == 1.0 => raw,
                        AttributeKind::Binary => {
                            return Err(Error::data(format!(
                                "attribute {:?} of author {:?} is {raw}, expected 0 or 1",
                                t.attribute, a.author_id
                            )))
                        }
                    };
                    (Some(y), Some(raw))
                }
            };
            Ok(AuthorExample { seq, target, raw })
        })
        .collect()
}

/// One labeled document with the blocks the classifier reads.
#[derive(Clone, Debug, PartialEq)]
pub struct DocExample {
    pub id: String,
    pub author_id: String,
    pub seq: BlockSequence,
    pub label: usize,
}

/// Which documents form a classification task.
#[derive(Clone, Debug)]
pub struct DocSelection<'a> {
    pub label: &'a str,
    pub classes: &'a [String],
    /// Build history from strictly earlier documents (anchor protocol).
    pub history: bool,
    /// Extra document labels a document must carry to be included.
    pub filter: &'a BTreeMap<String, String>,
}

pub fn doc_examples(
    corpus: &Corpus,
    tokenizer: &dyn Tokenizer,
    block_len: usize,
    max_blocks: usize,
    sel: &DocSelection<'_>,
) -> Result<Vec<DocExample>> {
    let per_author: Vec<Vec<DocExample>> = corpus
        .authors
        .par_iter()
        .map(|a| {
            let mut out = Vec::new();
            for (i, doc) in a.documents.iter().enumerate() {
                let Some(label) = doc.labels.get(sel.label) else { continue };
                if sel.filter.iter().any(|(k, v)| doc.labels.get(k) != Some(v)) {
                    continue;
                }
                let class = sel.classes.iter().position(|c| c == label).ok_or_else(|| {
                    Error::data(format!(
                        "document {i} of {:?} has label {label:?} outside {:?}",
                        a.author_id, sel.classes
                    ))
                })?;
                let seq = if sel.history {
                    build_blocks(a, tokenizer, block_len, max_blocks, Some(i))?
                } else {
                    let single = AuthorRecord {
                        author_id: a.author_id.clone(),
                        documents: vec![doc.clone()],
                        attributes: a.attributes.clone(),
                    };
                    build_blocks(&single, tokenizer, block_len, 1, None)?
                };
                out.push(DocExample {
                    id: format!("{}#{i}", a.author_id),
                    author_id: a.author_id.clone(),
                    seq,
                    label: class,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_author.into_iter().flatten().collect())
}

/// Masked mean of the final-layer hidden states over every live token of a
/// pass: `[1, d_model]`.
pub fn pooled_hidden(tape: &mut Tape, pass: &AuthorPass, seq: &BlockSequence) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut total = 0usize;
    for (i, out) in pass.live_outputs() {
        let mask = &seq.blocks[i].mask;
        let n = mask.iter().filter(|&&m| m).count();
        let m = masked_mean_rows(tape, out.last_hidden(), mask)?;
        let m = tape.scale(m, n as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
        total += n;
    }
    let acc = acc.ok_or_else(|| Error::contract(format!("author {:?} has no live block", pass.author_id)))?;
    Ok(tape.scale(acc, 1.0 / total as f64))
}

/// Author-level representation: averaged user states in hulm mode, pooled
/// final hidden states in plain mode.
pub fn author_representation(tape: &mut Tape, pass: &AuthorPass, seq: &BlockSequence) -> Result<Var> {
    match pass.mode {
        PassMode::Hulm => average_user_states(tape, pass),
        PassMode::Plain => pooled_hidden(tape, pass, seq),
    }
}

/// Final-layer hidden state at the last non-padded token of the last live
/// block: `[1, d_model]`.
pub fn last_token_representation(tape: &mut Tape, pass: &AuthorPass, seq: &BlockSequence) -> Result<Var> {
    let (i, out) = pass
        .live_outputs()
        .last()
        .ok_or_else(|| Error::contract(format!("author {:?} has no live block", pass.author_id)))?;
    let pos = seq.blocks[i].last_valid().expect("live block has a valid position");
    tape.gather_rows(out.last_hidden(), &[pos])
}
