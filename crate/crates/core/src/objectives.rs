//! Training losses and the multi-task combination rules.

use serde::{Deserialize, Serialize};

use crate::corpus::BlockSequence;
use crate::error::{Error, Result};
use crate::human_context::AuthorPass;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::Init;

/// How the language-model loss and an auxiliary attribute loss are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    /// `L_a + L_b`.
    SumUnweighted,
    /// `½e^{-η_a}L_a + ½η_a + ½e^{-η_b}L_b + ½η_b`.
    HungMtl,
    /// `e^{-η_ce}L_ce + ½e^{-η_mse}L_mse + ½η_ce + ½η_mse`.
    GritHalved,
    /// `e^{-η_ce}L_ce + ½e^{-η_mse}L_mse + η_ce + ½η_mse`.
    GritUnhalved,
}

impl std::str::FromStr for CombineRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_unweighted" => Ok(Self::SumUnweighted),
            "hung_mtl" => Ok(Self::HungMtl),
            "grit_halved" => Ok(Self::GritHalved),
            "grit_unhalved" => Ok(Self::GritUnhalved),
            other => Err(Error::config(format!(
                "unknown combine rule {other:?} (sum_unweighted, hung_mtl, grit_halved, grit_unhalved)"
            ))),
        }
    }
}

/// The two learnable log-variances `η = log σ²`, stored as one-element
/// parameters and initialized to 0.
#[derive(Clone, Copy, Debug)]
pub struct LossVariances {
    /// Language-model task (`η_ce`, or the LM side of the group pair).
    pub lm: ParamId,
    /// Attribute task (`η_mse` or `η_dem`).
    pub attr: ParamId,
}

impl LossVariances {
    pub const LM: &'static str = "eta.lm";
    pub const ATTR: &'static str = "eta.attr";

    pub fn init(store: &mut ParamStore) -> Self {
        Self {
            lm: store.insert(Self::LM, Tensor::scalar(0.0).with_grad()),
            attr: store.insert(Self::ATTR, Tensor::scalar(0.0).with_grad()),
        }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::data(format!("checkpoint lacks {n}")));
        Ok(Self {
            lm: get(Self::LM)?,
            attr: get(Self::ATTR)?,
        })
    }

    pub fn values(&self, store: &ParamStore) -> (f64, f64) {
        (store.get(self.lm).values()[0], store.get(self.attr).values()[0])
    }
}

/// Next-token targets within one block: position `i` predicts token `i+1`
/// when both are non-padded. Returns per-row targets and 0/1 weights.
pub fn shifted_targets(tokens: &[usize], mask: &[bool]) -> (Vec<usize>, Vec<f64>) {
    let t = tokens.len();
    let mut targets = vec![0; t];
    let mut weights = vec![0.0; t];
    for i in 0..t.saturating_sub(1) {
        if mask[i] && mask[i + 1] {
            targets[i] = tokens[i + 1];
            weights[i] = 1.0;
        }
    }
    (targets, weights)
}

/// Summed next-token NLL over every live block of a pass, with the number
/// of predictions it covers. `None` when the pass has no prediction.
pub fn pass_nll(tape: &mut Tape, pass: &AuthorPass, seq: &BlockSequence) -> Result<Option<(Var, usize)>> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (i, out) in pass.live_outputs() {
        let block = &seq.blocks[i];
        let (targets, weights) = shifted_targets(&block.tokens, &block.mask);
        let n = weights.iter().filter(|&&w| w > 0.0).count();
        if n == 0 {
            continue;
        }
        let nll = tape.cross_entropy_sum(out.logits, &targets, &weights)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
        count += n;
    }
    Ok(total.map(|t| (t, count)))
}

/// Mean token-level NLL over all non-padded next-token positions of the
/// given passes.
pub fn hulm_loss(tape: &mut Tape, passes: &[(&AuthorPass, &BlockSequence)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (pass, seq) in passes {
        if let Some((nll, n)) = pass_nll(tape, pass, seq)? {
            total = Some(match total {
                Some(t) => tape.add(t, nll)?,
                None => nll,
            });
            count += n;
        }
    }
    match total {
        Some(t) => Ok(tape.scale(t, 1.0 / count as f64)),
        None => Err(Error::contract("every position is padded; no next-token targets")),
    }
}

/// `linear(layer_norm(x))`: the shared shape of every prediction head.
#[derive(Clone, Debug)]
pub struct Head {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Head {
    /// Registers `{prefix}.ln.g`, `{prefix}.ln.b`, `{prefix}.w`, `{prefix}.b`,
    /// replacing any previous head with the same prefix.
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let init = Init { seed };
        let n = |s: &str| format!("{prefix}.{s}");
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            ln_g: store.insert(n("ln.g"), init.constant(vec![d_in], 1.0)),
            ln_b: store.insert(n("ln.b"), init.constant(vec![d_in], 0.0)),
            w: store.insert(n("w"), init.normal(&n("w"), vec![d_in, d_out], std)),
            b: store.insert(n("b"), init.constant(vec![d_out], 0.0)),
            d_in,
            d_out,
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            store.id(&name).ok_or_else(|| Error::data(format!("checkpoint lacks head parameter {name}")))
        };
        let w = get("w")?;
        let shape = store.get(w).shape().to_vec();
        Ok(Self {
            ln_g: get("ln.g")?,
            ln_b: get("ln.b")?,
            w,
            b: get("b")?,
            d_in: shape[0],
            d_out: shape[1],
        })
    }

    /// `x: [n, d_in]` → `[n, d_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.ln_g);
        let b = tape.param(store, self.ln_b);
        let h = tape.layer_norm(x, g, b)?;
        let w = tape.param(store, self.w);
        let bias = tape.param(store, self.b);
        let y = tape.matmul(h, w)?;
        tape.add(y, bias)
    }
}

/// Mean squared error between `preds` (`n` elements) and `targets`.
pub fn mse_loss(tape: &mut Tape, preds: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(preds).to_vec();
    if shape.iter().product::<usize>() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension {
            op: "mse_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let y = tape.constant(shape, targets.to_vec())?;
    let d = tape.sub(preds, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Attribute regression: `mean((linear(layer_norm(Ū)) − y)²)` over authors.
/// `ubar` is `[n_authors, d_user]`.
pub fn attribute_regression_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Head,
    ubar: Var,
    targets: &[f64],
) -> Result<Var> {
    let preds = head.forward(tape, store, ubar)?;
    mse_loss(tape, preds, targets)
}

/// Mean binary cross-entropy on logits; labels must be 0 or 1.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("binary cross-entropy over an empty batch"));
    }
    let s = tape.bce_with_logits_sum(logits, labels)?;
    Ok(tape.scale(s, 1.0 / labels.len() as f64))
}

/// Demographic classification from pooled representations `[n, d]`.
pub fn attribute_classification_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Head,
    pooled: Var,
    labels: &[f64],
) -> Result<Var> {
    let logits = head.forward(tape, store, pooled)?;
    bce_loss(tape, logits, labels)
}

/// Mean multi-class cross-entropy of `logits: [n, k]`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("cross-entropy over an empty batch"));
    }
    let s = tape.cross_entropy_sum(logits, labels, &vec![1.0; labels.len()])?;
    Ok(tape.scale(s, 1.0 / labels.len() as f64))
}

/// `½·exp(−η)·L + ½·η`, the per-task uncertainty-adjusted loss.
pub fn combine_hung(tape: &mut Tape, loss: Var, eta: Var) -> Result<Var> {
    let neg = tape.scale(eta, -1.0);
    let prec = tape.exp(neg);
    let weighted = tape.mul(loss, prec)?;
    let s = tape.add(weighted, eta)?;
    Ok(tape.scale(s, 0.5))
}

/// Joins the LM loss and the attribute loss under `rule`. The η arguments
/// are ignored by [`CombineRule::SumUnweighted`].
pub fn combine(tape: &mut Tape, rule: CombineRule, l_ce: Var, l_aux: Var, eta_ce: Var, eta_aux: Var) -> Result<Var> {
    match rule {
        CombineRule::SumUnweighted => tape.add(l_ce, l_aux),
        CombineRule::HungMtl => {
            let a = combine_hung(tape, l_ce, eta_ce)?;
            let b = combine_hung(tape, l_aux, eta_aux)?;
            tape.add(a, b)
        }
        CombineRule::GritHalved | CombineRule::GritUnhalved => combine_grit(tape, l_ce, l_aux, eta_ce, eta_aux, rule),
    }
}

/// `exp(−η_ce)·L_ce + ½·exp(−η_mse)·L_mse + c·η_ce + ½·η_mse` with
/// `c = ½` (halved) or `c = 1` (unhalved).
pub fn combine_grit(
    tape: &mut Tape,
    l_ce: Var,
    l_mse: Var,
    eta_ce: Var,
    eta_mse: Var,
    rule: CombineRule,
) -> Result<Var> {
    let c = match rule {
        CombineRule::GritHalved => 0.5,
        CombineRule::GritUnhalved => 1.0,
        other => return Err(Error::config(format!("combine_grit called with {other:?}"))),
    };
    let n_ce = tape.scale(eta_ce, -1.0);
    let p_ce = tape.exp(n_ce);
    let t_ce = tape.mul(l_ce, p_ce)?;
    let n_mse = tape.scale(eta_mse, -1.0);
    let p_mse = tape.exp(n_mse);
    let t_mse = tape.mul(l_mse, p_mse)?;
    let t_mse = tape.scale(t_mse, 0.5);
    let r_ce = tape.scale(eta_ce, c);
    let r_mse = tape.scale(eta_mse, 0.5);
    let a = tape.add(t_ce, t_mse)?;
    let b = tape.add(r_ce, r_mse)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests;
