//! GPT-2 style causal transformer with an optional user-state query
//! injection at one layer.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::human_context::inject_query;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Tokens per block.
    pub block_len: usize,
    /// Layer (1-based) whose attention query receives the user state.
    pub insert_layer: usize,
    /// Layer (1-based) whose output feeds the user-state update.
    pub extract_layer: usize,
    pub max_blocks: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads, 64-token blocks,
    /// byte-level vocabulary plus one separator id.
    pub fn desk() -> Self {
        Self {
            vocab_size: crate::corpus::ByteTokenizer::VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            block_len: 64,
            insert_layer: 2,
            extract_layer: 3,
            max_blocks: 8,
            dropout: 0.1,
        }
    }

    /// GPT-2 small geometry with insert layer 2 and extract layer 11.
    pub fn gpt2_small() -> Self {
        Self {
            vocab_size: 50257,
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            block_len: 1024,
            insert_layer: 2,
            extract_layer: 11,
            max_blocks: 8,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "gpt2-small" => Ok(Self::gpt2_small()),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the user-state vector; tied to the model width.
    pub fn d_user(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(1 <= self.insert_layer && self.insert_layer <= self.extract_layer && self.extract_layer <= self.n_layers) {
            return Err(Error::config(format!(
                "need 1 <= insert_layer ({}) <= extract_layer ({}) <= n_layers ({})",
                self.insert_layer, self.extract_layer, self.n_layers
            )));
        }
        if self.vocab_size < 2 || self.block_len < 2 || self.max_blocks == 0 {
            return Err(Error::config("vocab_size and block_len must be >= 2, max_blocks >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    /// `[d_model, d_model]`, or `[d_model + d_user, d_model]` at the insert layer.
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
}

/// Parameters of the recurrent user-state pathway.
#[derive(Clone, Debug)]
pub struct UserStateParams {
    /// Initial state `[1, d_user]`, shared across authors.
    pub u0: ParamId,
    /// `[d_user, d_user]`, applied as `U · W_U`.
    pub w_u: ParamId,
    /// `[d_model, d_user]`, applied to the pooled extract-layer hidden state.
    pub w_h: ParamId,
}

/// Handles to a transformer's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    user: UserStateParams,
}

/// Per-block forward results.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `[block_len, vocab_size]` next-token logits.
    pub logits: Var,
    /// Residual stream after each layer: `hidden[0]` is the embedding sum,
    /// `hidden[l]` the output of layer `l`.
    pub hidden: Vec<Var>,
    /// Final layer-normed hidden states `[block_len, d_model]`.
    pub final_norm: Var,
    /// Query used at the insert layer when a user state was supplied.
    pub injected_query: Option<Var>,
}

impl BlockOutput {
    pub fn extract(&self, config: &ModelConfig) -> Var {
        self.hidden[config.extract_layer]
    }

    pub fn last_hidden(&self) -> Var {
        *self.hidden.last().expect("at least the embedding layer")
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded initializer whose draws for a name do not depend on what else
/// was initialized before it.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    pub fn normal(&self, name: &str, shape: Vec<usize>, std: f64) -> Tensor {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let vals = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape, vals).expect("shape matches").with_grad()
    }

    pub fn constant(&self, shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("shape matches").with_grad()
    }
}

const INIT_STD: f64 = 0.02;

impl Transformer {
    /// Registers freshly initialized parameters in `store`.
    pub fn init(config: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let init = Init { seed };
        let (v, d, du) = (config.vocab_size, config.d_model, config.d_user());
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut put = |name: String, t: Tensor| store.insert(name, t);

        let tok_emb = put("wte".into(), init.normal("wte", vec![v, d], INIT_STD));
        let pos_emb = put("wpe".into(), init.normal("wpe", vec![config.block_len, d], 0.01));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            let q_rows = if l == config.insert_layer { d + du } else { d };
            layers.push(LayerParams {
                ln1_g: put(p("ln_1.g"), init.constant(vec![d], 1.0)),
                ln1_b: put(p("ln_1.b"), init.constant(vec![d], 0.0)),
                w_q: put(p("attn.w_q"), init.normal(&p("attn.w_q"), vec![q_rows, d], INIT_STD)),
                b_q: put(p("attn.b_q"), init.constant(vec![d], 0.0)),
                w_k: put(p("attn.w_k"), init.normal(&p("attn.w_k"), vec![d, d], INIT_STD)),
                b_k: put(p("attn.b_k"), init.constant(vec![d], 0.0)),
                w_v: put(p("attn.w_v"), init.normal(&p("attn.w_v"), vec![d, d], INIT_STD)),
                b_v: put(p("attn.b_v"), init.constant(vec![d], 0.0)),
                w_o: put(p("attn.w_o"), init.normal(&p("attn.w_o"), vec![d, d], resid_std)),
                b_o: put(p("attn.b_o"), init.constant(vec![d], 0.0)),
                ln2_g: put(p("ln_2.g"), init.constant(vec![d], 1.0)),
                ln2_b: put(p("ln_2.b"), init.constant(vec![d], 0.0)),
                w_fc: put(p("mlp.w_fc"), init.normal(&p("mlp.w_fc"), vec![d, 4 * d], INIT_STD)),
                b_fc: put(p("mlp.b_fc"), init.constant(vec![4 * d], 0.0)),
                w_proj: put(p("mlp.w_proj"), init.normal(&p("mlp.w_proj"), vec![4 * d, d], resid_std)),
                b_proj: put(p("mlp.b_proj"), init.constant(vec![d], 0.0)),
            });
        }
        let ln_f_g = put("ln_f.g".into(), init.constant(vec![d], 1.0));
        let ln_f_b = put("ln_f.b".into(), init.constant(vec![d], 0.0));
        let xavier_u = 1.0 / (du as f64).sqrt();
        let xavier_h = 1.0 / (d as f64).sqrt();
        let user = UserStateParams {
            u0: put("user.u0".into(), init.constant(vec![1, du], 0.0)),
            w_u: put("user.w_u".into(), init.normal("user.w_u", vec![du, du], xavier_u)),
            w_h: put("user.w_h".into(), init.normal("user.w_h", vec![d, du], xavier_h)),
        };
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            ln_f_g,
            ln_f_b,
            user,
        })
    }

    /// Looks up an existing parameter set, checking every shape.
    pub fn bind(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (v, d, du) = (config.vocab_size, config.d_model, config.d_user());
        let get = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "bind",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: shape,
                });
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            let q_rows = if l == config.insert_layer { d + du } else { d };
            layers.push(LayerParams {
                ln1_g: get(p("ln_1.g"), vec![d])?,
                ln1_b: get(p("ln_1.b"), vec![d])?,
                w_q: get(p("attn.w_q"), vec![q_rows, d])?,
                b_q: get(p("attn.b_q"), vec![d])?,
                w_k: get(p("attn.w_k"), vec![d, d])?,
                b_k: get(p("attn.b_k"), vec![d])?,
                w_v: get(p("attn.w_v"), vec![d, d])?,
                b_v: get(p("attn.b_v"), vec![d])?,
                w_o: get(p("attn.w_o"), vec![d, d])?,
                b_o: get(p("attn.b_o"), vec![d])?,
                ln2_g: get(p("ln_2.g"), vec![d])?,
                ln2_b: get(p("ln_2.b"), vec![d])?,
                w_fc: get(p("mlp.w_fc"), vec![d, 4 * d])?,
                b_fc: get(p("mlp.b_fc"), vec![4 * d])?,
                w_proj: get(p("mlp.w_proj"), vec![4 * d, d])?,
                b_proj: get(p("mlp.b_proj"), vec![d])?,
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb: get("wte".into(), vec![v, d])?,
            pos_emb: get("wpe".into(), vec![config.block_len, d])?,
            layers,
            ln_f_g: get("ln_f.g".into(), vec![d])?,
            ln_f_b: get("ln_f.b".into(), vec![d])?,
            user: UserStateParams {
                u0: get("user.u0".into(), vec![1, du])?,
                w_u: get("user.w_u".into(), vec![du, du])?,
                w_h: get("user.w_h".into(), vec![d, du])?,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l - 1]
    }

    pub fn user_params(&self) -> &UserStateParams {
        &self.user
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Zeroes the user-state rows of the insert-layer query weight, which
    /// makes injected and plain forwards coincide.
    pub fn zero_user_query_weights(&self, store: &mut ParamStore) {
        let d = self.config.d_model;
        let w = store.get_mut(self.layer(self.config.insert_layer).w_q);
        w.values_mut()[d * d..].fill(0.0);
    }

    /// Runs one block. `mask[i]` marks non-padded positions; with `user_state`
    /// absent the model is a plain causal LM.
    pub fn forward_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        mask: &[bool],
        user_state: Option<Var>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<BlockOutput> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 || t > cfg.block_len {
            return Err(Error::contract(format!(
                "block of {t} tokens (block_len {})",
                cfg.block_len
            )));
        }
        if mask.len() != t {
            return Err(Error::Dimension {
                op: "forward_block",
                lhs: vec![t],
                rhs: vec![mask.len()],
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }
        let attn_mask = causal_mask(mask);
        let dropout = cfg.dropout;
        let mut drop = |tape: &mut Tape, x: Var| match rng.as_deref_mut() {
            Some(r) if dropout > 0.0 => tape.dropout(x, dropout, r),
            _ => x,
        };

        let wte = tape.param(store, self.tok_emb);
        let wpe = tape.param(store, self.pos_emb);
        let tok = tape.gather_rows(wte, tokens)?;
        let pos = tape.slice_rows(wpe, 0, t)?;
        let x = tape.add(tok, pos)?;
        let mut x = drop(tape, x);
        let mut hidden = vec![x];
        let mut injected_query = None;

        for (li, lp) in self.layers.iter().enumerate() {
            let l = li + 1;
            let g1 = tape.param(store, lp.ln1_g);
            let b1 = tape.param(store, lp.ln1_b);
            let h = tape.layer_norm(x, g1, b1)?;
            let query = if l == cfg.insert_layer {
                let w_q = tape.param(store, lp.w_q);
                let b_q = tape.param(store, lp.b_q);
                match user_state {
                    // The query sees the layer-normed input of this layer,
                    // i.e. the normalized H^(IN-1).
                    Some(u) => {
                        let q = inject_query(tape, h, u, w_q, b_q)?;
                        injected_query = Some(q);
                        Some(q)
                    }
                    None => {
                        let w_h = tape.slice_rows(w_q, 0, cfg.d_model)?;
                        let q = tape.matmul(h, w_h)?;
                        Some(tape.add(q, b_q)?)
                    }
                }
            } else {
                None
            };
            let a = self.causal_attention(tape, store, lp, h, &attn_mask, query)?;
            let a = drop(tape, a);
            x = tape.add(x, a)?;

            let g2 = tape.param(store, lp.ln2_g);
            let b2 = tape.param(store, lp.ln2_b);
            let h2 = tape.layer_norm(x, g2, b2)?;
            let w_fc = tape.param(store, lp.w_fc);
            let b_fc = tape.param(store, lp.b_fc);
            let f = tape.matmul(h2, w_fc)?;
            let f = tape.add(f, b_fc)?;
            let f = tape.gelu(f);
            let w_proj = tape.param(store, lp.w_proj);
            let b_proj = tape.param(store, lp.b_proj);
            let m = tape.matmul(f, w_proj)?;
            let m = tape.add(m, b_proj)?;
            let m = drop(tape, m);
            x = tape.add(x, m)?;
            hidden.push(x);
        }

        let gf = tape.param(store, self.ln_f_g);
        let bf = tape.param(store, self.ln_f_b);
        let final_norm = tape.layer_norm(x, gf, bf)?;
        let logits = tape.matmul_bt(final_norm, wte)?;
        Ok(BlockOutput {
            logits,
            hidden,
            final_norm,
            injected_query,
        })
    }

    /// Multi-head causal self-attention over the normalized input `h`.
    ///
    /// Keys and values always come from `h`; `query_override`, when given,
    /// replaces the query projection.
    pub fn causal_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lp: &LayerParams,
        h: Var,
        attn_mask: &Arc<[bool]>,
        query_override: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let t = tape.shape(h)[0];
        if attn_mask.len() != t * t {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: vec![t, t],
                rhs: vec![attn_mask.len()],
            });
        }
        let q = match query_override {
            Some(q) => {
                if tape.shape(q) != [t, cfg.d_model] {
                    return Err(Error::Dimension {
                        op: "causal_attention",
                        lhs: vec![t, cfg.d_model],
                        rhs: tape.shape(q).to_vec(),
                    });
                }
                q
            }
            None => {
                let w = tape.param(store, lp.w_q);
                let b = tape.param(store, lp.b_q);
                let q = tape.matmul(h, w)?;
                tape.add(q, b)?
            }
        };
        let project = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.matmul(h, w)?;
            tape.add(y, b)
        };
        let k = project(tape, lp.w_k, lp.b_k)?;
        let v = project(tape, lp.w_v, lp.b_v)?;
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores, Some(attn_mask))?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let w_o = tape.param(store, lp.w_o);
        let b_o = tape.param(store, lp.b_o);
        let o = tape.matmul(cat, w_o)?;
        tape.add(o, b_o)
    }
}

/// `allowed[i * t + j]` iff `j <= i` and position `j` is not padding. A query
/// row with no valid key (a padded prefix) falls back to attending to itself.
pub fn causal_mask(mask: &[bool]) -> Arc<[bool]> {
    let t = mask.len();
    let mut allowed = vec![false; t * t];
    for i in 0..t {
        let mut any = false;
        for j in 0..=i {
            if mask[j] {
                allowed[i * t + j] = true;
                any = true;
            }
        }
        if !any {
            allowed[i * t + i] = true;
        }
    }
    allowed.into()
}
