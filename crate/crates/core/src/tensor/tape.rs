use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::gemm::matmul_into;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, trans_b: bool, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, mode: Bcast },
    Sub { a: usize, b: usize, mode: Bcast },
    Mul { a: usize, b: usize, mode: Bcast },
    Scale { a: usize, c: f64 },
    Mask { a: usize, mask: Vec<f64> },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose { a: usize, rows: usize, cols: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    SliceRows { a: usize, start: usize },
    BroadcastRows { a: usize },
    Gather { table: usize, ids: Vec<usize> },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceWithLogits { logits: usize, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// reverse topological order and [`Tape::backward`] visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite(op: &'static str, xs: &[f64]) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericDomain {
            op,
            detail: format!("non-finite input {x}"),
        });
    }
    Ok(())
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: usize) -> bool {
        self.nodes[v].tracked
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records an input. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.into_values(), Op::Leaf, false))
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param,
            t.requires_grad(),
        );
        self.params.insert(id, v);
        v
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set. Both operands are 2-D.
    pub fn matmul_opt(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            trans_b,
            &mut out,
            false,
        );
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, true)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na = self.nodes[a.0].value.len();
        let nb = self.nodes[b.0].value.len();
        if sa == sb {
            Ok(Bcast::Same)
        } else if nb == 1 {
            Ok(Bcast::Scalar)
        } else if nb == cols_of(sa) && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1)) && na.is_multiple_of(nb) {
            Ok(Bcast::Row)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Vec<f64>, Bcast)> {
        let mode = self.bcast(op, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = match mode {
            Bcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Scalar => av.iter().map(|x| f(*x, bv[0])).collect(),
            Bcast::Row => {
                let c = bv.len();
                av.iter().enumerate().map(|(i, x)| f(*x, bv[i % c])).collect()
            }
        };
        Ok((out, mode))
    }

    /// Elementwise `a + b`; `b` may be the same shape, a row vector, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0, mode }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a: a.0, b: b.0, mode }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0, mode }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let tracked = self.tracked(a.0);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a: a.0, c }, tracked)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let tracked = self.tracked(a.0);
        self.push(self.shape(a).to_vec(), out, Op::Mask { a: a.0, mask }, tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let tracked = self.tracked(a.0);
        self.push(self.shape(a).to_vec(), out, op, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let xs = &self.nodes[a.0].value;
        if let Some(x) = xs.iter().find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("input {x} outside (0, inf)"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log { a: a.0 }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu { a: a.0 })
    }

    /// Softmax over the last axis. `mask`, when given, has one entry per
    /// element; masked entries get probability exactly zero. Every row must
    /// keep at least one unmasked entry.
    pub fn softmax(&mut self, a: Var, mask: Option<&Arc<[bool]>>) -> Result<Var> {
        let xs = &self.nodes[a.0].value;
        check_finite("softmax", xs)?;
        let c = cols_of(self.shape(a));
        if let Some(m) = mask {
            if m.len() != xs.len() {
                return Err(Error::Dimension {
                    op: "softmax",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; xs.len()];
        for (r, (row, orow)) in xs.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("softmax row {r} fully masked")));
            }
            let mut z = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let tracked = self.tracked(a.0);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a: a.0 }, tracked))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = cols_of(self.shape(x));
        for v in [gain, bias] {
            if self.nodes[v.0].value.len() != c {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let rows = xs.len() / c.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(gain.0) || self.tracked(bias.0);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xs = &self.nodes[a.0].value;
        let mut out = vec![0.0; xs.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xs[i * cols + j];
            }
        }
        let tracked = self.tracked(a.0);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, tracked))
    }

    /// Columns `start..start+len` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let c = s[1];
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let tracked = self.tracked(a.0);
        Ok(self.push(vec![s[0], len], out, Op::SliceCols { a: a.0, start, len }, tracked))
    }

    /// Horizontal concatenation of 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.shape(*p).first().copied().unwrap_or(0),
            None => return Err(Error::contract("concat_cols of nothing")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(p.0));
        let parts = parts.iter().map(|p| p.0).zip(widths).collect();
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts }, tracked))
    }

    /// Rows `start..start+len` of a 2-D node.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let c = s[1];
        let out = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(a.0);
        Ok(self.push(vec![len, c], out, Op::SliceRows { a: a.0, start }, tracked))
    }

    /// Repeats a single row `n` times: `[1, d]` or `[d]` to `[n, d]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = self.nodes[a.0].value.len();
        if !(s.len() == 1 || (s.len() == 2 && s[0] == 1)) {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                lhs: s,
                rhs: vec![n],
            });
        }
        let row = self.nodes[a.0].value.clone();
        let out = (0..n).flat_map(|_| row.iter().copied()).collect();
        let tracked = self.tracked(a.0);
        Ok(self.push(vec![n, d], out, Op::BroadcastRows { a: a.0 }, tracked))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary { id: bad, vocab });
        }
        let tv = &self.nodes[table.0].value;
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let tracked = self.tracked(table.0);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Sum of all elements, as a one-element node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let tracked = self.tracked(a.0);
        self.push(vec![1], vec![s], Op::Sum { a: a.0 }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of per-row negative log-likelihoods:
    /// `Σ_i w_i · (logsumexp(logits_i) − logits_i[targets_i])`.
    /// Rows with zero weight contribute nothing and may carry any target.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let (rows, v) = (s[0], s[1]);
        let xs = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab: v });
            }
            let row = &xs[r * v..(r + 1) * v];
            check_finite("cross_entropy", row)?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total += weights[r] * (lse - row[t]);
        }
        let tracked = self.tracked(logits.0);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Summed binary cross-entropy on raw logits, one label in {0, 1} per element.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let xs = &self.nodes[logits.0].value;
        if xs.len() != labels.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(y) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(Error::contract(format!("binary label {y} not in {{0, 1}}")));
        }
        check_finite("bce_with_logits", xs)?;
        // softplus(x) - y*x, written stably
        let total = xs
            .iter()
            .zip(labels)
            .map(|(x, y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let tracked = self.tracked(logits.0);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::BceWithLogits {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse pass from a one-element `loss`. Gradients of earlier passes
    /// on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Gradients of the last backward pass for every parameter on this tape,
    /// ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(&mut self, idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].tracked {
            return;
        }
        let n = self.nodes[idx].shape.iter().product();
        let slot = self.grads[idx].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_bcast(&mut self, b: usize, mode: Bcast, contrib: &[f64]) {
        self.acc(b, |gb| match mode {
            Bcast::Same => gb.iter_mut().zip(contrib).for_each(|(x, y)| *x += y),
            Bcast::Scalar => gb[0] += contrib.iter().sum::<f64>(),
            Bcast::Row => {
                let c = gb.len();
                for (i, y) in contrib.iter().enumerate() {
                    gb[i % c] += y;
                }
            }
        });
    }

    fn bvalue(&self, b: usize, mode: Bcast, i: usize) -> f64 {
        let bv = &self.nodes[b].value;
        match mode {
            Bcast::Same => bv[i],
            Bcast::Scalar => bv[0],
            Bcast::Row => bv[i % bv.len()],
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are temporarily moved out so the node list can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b, m, k, n } => {
                let (a, b, trans_b, m, k, n) = (*a, *b, *trans_b, *m, *k, *n);
                if self.tracked(a) {
                    let bv = std::mem::take(&mut self.nodes[b].value);
                    // dA = dC · op(B)ᵀ
                    self.acc(a, |ga| matmul_into(m, n, k, g, false, &bv, !trans_b, ga, true));
                    self.nodes[b].value = bv;
                }
                if self.tracked(b) {
                    let av = std::mem::take(&mut self.nodes[a].value);
                    if trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        self.acc(b, |gb| matmul_into(n, m, k, g, true, &av, false, gb, true));
                    } else {
                        // dB = Aᵀ · dC
                        self.acc(b, |gb| matmul_into(k, m, n, &av, true, g, false, gb, true));
                    }
                    self.nodes[a].value = av;
                }
            }
            Op::Add { a, b, mode } => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_bcast(*b, *mode, g);
            }
            Op::Sub { a, b, mode } => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc_bcast(*b, *mode, &neg);
            }
            Op::Mul { a, b, mode } => {
                let (a, b, mode) = (*a, *b, *mode);
                if self.tracked(a) {
                    let da: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * self.bvalue(b, mode, j)).collect();
                    self.acc(a, |ga| ga.iter_mut().zip(&da).for_each(|(x, y)| *x += y));
                }
                if self.tracked(b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a].value).map(|(gj, aj)| gj * aj).collect();
                    self.acc_bcast(b, mode, &db);
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Mask { a, mask } => {
                self.acc(*a, |ga| {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                });
            }
            Op::Tanh { a } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                self.acc(*a, |ga| {
                    for ((x, gj), yj) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gj * (1.0 - yj * yj);
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Exp { a } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                self.acc(*a, |ga| {
                    for ((x, gj), yj) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gj * yj;
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Log { a } => {
                let xa = std::mem::take(&mut self.nodes[*a].value);
                self.acc(*a, |ga| {
                    for ((x, gj), aj) in ga.iter_mut().zip(g).zip(&xa) {
                        *x += gj / aj;
                    }
                });
                self.nodes[*a].value = xa;
            }
            Op::Gelu { a } => {
                let xa = std::mem::take(&mut self.nodes[*a].value);
                self.acc(*a, |ga| {
                    for ((x, gj), aj) in ga.iter_mut().zip(g).zip(&xa) {
                        *x += gj * gelu(*aj).1;
                    }
                });
                self.nodes[*a].value = xa;
            }
            Op::Softmax { a } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                let c = cols_of(&self.nodes[i].shape);
                self.acc(*a, |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = rstd.len().max(1);
                let c = xhat.len() / c;
                if self.tracked(gain) {
                    self.acc(gain, |gg| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                self.acc(bias, |gb| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                });
                if self.tracked(x) {
                    let gv = std::mem::take(&mut self.nodes[gain].value);
                    self.acc(x, |gx| {
                        for (r, ((gxr, gr), hr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            let dh: Vec<f64> = gr.iter().zip(&gv).map(|(p, q)| p * q).collect();
                            let mean_dh = dh.iter().sum::<f64>() / c as f64;
                            let mean_dhh = dh.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                            for j in 0..c {
                                gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                            }
                        }
                    });
                    self.nodes[gain].value = gv;
                }
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.acc(*a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let (start, len) = (*start, *len);
                let c = cols_of(&self.nodes[*a].shape);
                self.acc(*a, |ga| {
                    for (gar, gr) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        for j in 0..len {
                            gar[start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    self.acc(p, |gp| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            for j in 0..w {
                                gpr[j] += gr[offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                let c = cols_of(&self.nodes[*a].shape);
                let off = start * c;
                self.acc(*a, |ga| {
                    for (j, y) in g.iter().enumerate() {
                        ga[off + j] += y;
                    }
                });
            }
            Op::BroadcastRows { a } => {
                self.acc(*a, |ga| {
                    let d = ga.len();
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            ga[j] += gr[j];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = cols_of(&self.nodes[*table].shape);
                self.acc(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let s = g[0];
                let v = cols_of(&self.nodes[*logits].shape);
                self.acc(*logits, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += s * w * probs[r * v + j];
                        }
                        gl[r * v + t] -= s * w;
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let s = g[0];
                let xs = std::mem::take(&mut self.nodes[*logits].value);
                self.acc(*logits, |gl| {
                    for ((x, gx), y) in xs.iter().zip(gl.iter_mut()).zip(labels) {
                        let p = 1.0 / (1.0 + (-x).exp());
                        *gx += s * (p - y);
                    }
                });
                self.nodes[*logits].value = xs;
            }
        }
        self.nodes[i].op = op;
    }
}
