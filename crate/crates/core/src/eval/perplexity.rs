use rayon::prelude::*;

use crate::corpus::BlockSequence;
use super::predictions::{PredictionRow, PredictionSet, Unit};
use crate::error::{Error, Result};
use crate::human_context::{process_author, PassMode};
use crate::objectives::pass_nll;
use crate::tensor::{ParamStore, Tape};
use crate::transformer::Transformer;

/// Summed next-token NLL and prediction count per author, evaluated in
/// parallel over a frozen model.
pub fn author_nll(model: &Transformer, store: &ParamStore, seqs: &[BlockSequence], mode: PassMode) -> Result<Vec<(f64, usize)>> {
    seqs.par_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let pass = process_author(model, &mut tape, store, seq, mode, None)?;
            Ok(pass_nll(&mut tape, &pass, seq)?.map_or((0.0, 0), |(v, n)| (tape.scalar(v), n)))
        })
        .collect()
}

/// `exp(total NLL / total predictions)` over a split.
pub fn perplexity(model: &Transformer, store: &ParamStore, seqs: &[BlockSequence], mode: PassMode) -> Result<f64> {
    let per = author_nll(model, store, seqs, mode)?;
    let (nll, n) = per.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::contract("perplexity over an empty split"));
    }
    Ok((nll / n as f64).exp())
}

/// Per-author language-model rows for the `perplexity` metric: prediction
/// is the summed NLL, gold the number of predicted tokens. Authors with no
/// predicted token are dropped.
pub fn lm_prediction_set(
    model: &Transformer,
    store: &ParamStore,
    seqs: &[BlockSequence],
    mode: PassMode,
    task: &str,
) -> Result<PredictionSet> {
    let per = author_nll(model, store, seqs, mode)?;
    let rows = seqs
        .iter()
        .zip(per)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(s, (nll, n))| PredictionRow {
            id: s.author_id.clone(),
            prediction: nll,
            gold: n as f64,
            bucket: None,
        })
        .collect();
    PredictionSet::new(Unit::Author, task, None, rows)
}
