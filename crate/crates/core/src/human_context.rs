//! User-state injection, the recurrent user-state update, and whole-author
//! passes.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::BlockSequence;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};
use crate::transformer::{BlockOutput, Transformer};

/// Snapshot of one author's user state after a given block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub author_id: String,
    /// 0 for the initial state, `i` after block `i`.
    pub block_index: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassMode {
    /// User states are threaded through the blocks and injected.
    Hulm,
    /// Blocks are independent causal-LM forwards.
    Plain,
}

/// Query at the insert layer: `[H ; U_prev] · W_q + b_q`, with `U_prev`
/// broadcast to every position. Computed as `H · W_q[..d] + U · W_q[d..]`,
/// which avoids materializing the concatenation.
pub fn inject_query(tape: &mut Tape, h: Var, u_prev: Var, w_q: Var, b_q: Var) -> Result<Var> {
    let (t, d) = match *tape.shape(h) {
        [t, d] => (t, d),
        ref s => return Err(Error::contract(format!("hidden state must be 2-D, got {s:?}"))),
    };
    let du = match *tape.shape(u_prev) {
        [1, du] => du,
        ref s => return Err(Error::contract(format!("user state must be [1, d_user], got {s:?}"))),
    };
    if tape.shape(w_q) != [d + du, d] {
        return Err(Error::config(format!(
            "insert-layer W_q has shape {:?}, expected [{}, {d}]",
            tape.shape(w_q),
            d + du
        )));
    }
    let w_h = tape.slice_rows(w_q, 0, d)?;
    let w_u = tape.slice_rows(w_q, d, du)?;
    let qh = tape.matmul(h, w_h)?;
    let qu = tape.matmul(u_prev, w_u)?;
    let qu = tape.broadcast_rows(qu, t)?;
    let q = tape.add(qh, qu)?;
    tape.add(q, b_q)
}

/// Mean of `h`'s rows over positions where `mask` is set, as a `[1, d]` var.
pub fn masked_mean_rows(tape: &mut Tape, h: Var, mask: &[bool]) -> Result<Var> {
    let t = tape.shape(h)[0];
    if mask.len() != t {
        return Err(Error::Dimension {
            op: "masked_mean_rows",
            lhs: vec![t],
            rhs: vec![mask.len()],
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::contract("masked mean over a fully padded block"));
    }
    let w = mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    let w = tape.constant(vec![1, t], w)?;
    tape.matmul(w, h)
}

/// `U_i = tanh(U_{i-1} · W_U + pool(H^(E)) · W_H)`, pooling by masked mean.
pub fn update_user_state(tape: &mut Tape, u_prev: Var, h_e: Var, mask: &[bool], w_u: Var, w_h: Var) -> Result<Var> {
    let pooled = masked_mean_rows(tape, h_e, mask)?;
    let a = tape.matmul(u_prev, w_u)?;
    let b = tape.matmul(pooled, w_h)?;
    let s = tape.add(a, b)?;
    Ok(tape.tanh(s))
}

/// Everything recorded while running one author's blocks.
#[derive(Clone, Debug)]
pub struct AuthorPass {
    pub author_id: String,
    pub mode: PassMode,
    /// One entry per block; `None` for fully padded blocks, which are skipped.
    pub outputs: Vec<Option<BlockOutput>>,
    /// `U_0..U_T` in hulm mode (a skipped block repeats the previous state);
    /// empty in plain mode.
    pub states: Vec<Var>,
    pub non_padded_blocks: usize,
}

impl AuthorPass {
    pub fn user_state(&self, tape: &Tape, i: usize) -> Option<UserState> {
        self.states.get(i).map(|&v| UserState {
            author_id: self.author_id.clone(),
            block_index: i,
            values: tape.value(v).to_vec(),
        })
    }

    pub fn live_outputs(&self) -> impl Iterator<Item = (usize, &BlockOutput)> {
        self.outputs.iter().enumerate().filter_map(|(i, o)| o.as_ref().map(|o| (i, o)))
    }
}

/// Runs every block of an author in temporal order. In hulm mode block `t`
/// is forwarded with `U_{t-1}` injected, then the state is updated from the
/// extract layer.
pub fn process_author(
    model: &Transformer,
    tape: &mut Tape,
    store: &ParamStore,
    seq: &BlockSequence,
    mode: PassMode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<AuthorPass> {
    if seq.blocks.is_empty() {
        return Err(Error::contract(format!("author {:?} has no blocks", seq.author_id)));
    }
    let cfg = model.config();
    if seq.blocks.len() > cfg.max_blocks {
        return Err(Error::contract(format!(
            "author {:?} has {} blocks, model allows {}",
            seq.author_id,
            seq.blocks.len(),
            cfg.max_blocks
        )));
    }
    let up = model.user_params();
    let mut states = Vec::new();
    let mut user = None;
    if mode == PassMode::Hulm {
        let u0 = tape.param(store, up.u0);
        states.push(u0);
        user = Some((u0, tape.param(store, up.w_u), tape.param(store, up.w_h)));
    }
    let mut outputs = Vec::with_capacity(seq.blocks.len());
    let mut live = 0;
    for block in &seq.blocks {
        if !block.mask.iter().any(|&m| m) {
            outputs.push(None);
            if let Some(&last) = states.last() {
                states.push(last);
            }
            continue;
        }
        live += 1;
        let u_prev = states.last().copied();
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        let out = model.forward_block(tape, store, &block.tokens, &block.mask, u_prev, r)?;
        if let (Some((_, w_u, w_h)), Some(u_prev)) = (user, u_prev) {
            let u = update_user_state(tape, u_prev, out.extract(cfg), &block.mask, w_u, w_h)?;
            states.push(u);
        }
        outputs.push(Some(out));
    }
    Ok(AuthorPass {
        author_id: seq.author_id.clone(),
        mode,
        outputs,
        states,
        non_padded_blocks: live,
    })
}

/// Mean of `U_1..U_T` over non-padded blocks (`U_0` excluded).
pub fn average_user_states(tape: &mut Tape, pass: &AuthorPass) -> Result<Var> {
    if pass.mode != PassMode::Hulm {
        return Err(Error::contract("user states are only available from a hulm pass"));
    }
    let picked: Vec<Var> = pass
        .outputs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_some())
        .map(|(i, _)| pass.states[i + 1])
        .collect();
    if picked.is_empty() {
        return Err(Error::contract(format!("author {:?} has no non-padded block", pass.author_id)));
    }
    let mut acc = picked[0];
    for &v in &picked[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / picked.len() as f64))
}

/// Writes one JSON object per line: `{"author_id": .., "user_state": [..]}`.
pub fn write_user_state_dump<W: Write>(mut w: W, rows: &[(String, Vec<f64>)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        author_id: &'a str,
        user_state: &'a [f64],
    }
    for (id, u) in rows {
        let line = serde_json::to_string(&Row {
            author_id: id,
            user_state: u,
        })
        .map_err(|e| Error::data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
