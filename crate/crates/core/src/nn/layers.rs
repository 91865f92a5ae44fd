use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Mat, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::NnError;

/// `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), 1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Builds a keep-mask for `n_q` queries over `n_k` keys. Returns `None` when
/// nothing is masked.
pub fn attention_mask(
    n_q: usize,
    n_k: usize,
    causal: bool,
    key_keep: Option<&[bool]>,
) -> Option<Array2<bool>> {
    if !causal && key_keep.is_none_or(|k| k.iter().all(|&b| b)) {
        return None;
    }
    if let Some(k) = key_keep {
        assert_eq!(k.len(), n_k, "key mask length");
    }
    Some(Array2::from_shape_fn((n_q, n_k), |(i, j)| {
        (!causal || j <= i) && key_keep.is_none_or(|k| k[j])
    }))
}

/// Multi-head scaled dot-product attention. Head `i` uses column block `i`
/// of the fused `W_q`, `W_k`, `W_v` projections; heads are concatenated and
/// projected by `W_o`. No projection biases.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::HeadsDoNotDivide { d_model, heads });
        }
        Ok(Self {
            heads,
            d_model,
            wq: store.add_xavier(format!("{name}.wq"), d_model, d_model, rng),
            wk: store.add_xavier(format!("{name}.wk"), d_model, d_model, rng),
            wv: store.add_xavier(format!("{name}.wv"), d_model, d_model, rng),
            wo: store.add_xavier(format!("{name}.wo"), d_model, d_model, rng),
        })
    }

    /// Attention of `q` (n × d) over keys `k` and values `v` (m × d).
    /// `keep` is an n × m mask; rows whose keys are all masked produce zeros.
    pub fn forward(
        &self,
        t: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        keep: Option<&Array2<bool>>,
    ) -> Result<Var, NnError> {
        let (nq, dq) = t.shape(q);
        let (nk, dk) = t.shape(k);
        let (nv, dv) = t.shape(v);
        if dq != self.d_model || dk != self.d_model || dv != self.d_model || nk != nv {
            return Err(NnError::Shape(format!(
                "attention q {nq}x{dq}, k {nk}x{dk}, v {nv}x{dv} with d_model {}",
                self.d_model
            )));
        }
        if let Some(m) = keep {
            if m.dim() != (nq, nk) {
                return Err(NnError::Shape(format!(
                    "attention mask {:?} for {nq} queries and {nk} keys",
                    m.dim()
                )));
            }
        }
        let wq = t.param(self.wq);
        let wk = t.param(self.wk);
        let wv = t.param(self.wv);
        let qp = t.matmul(q, wq);
        let kp = t.matmul(k, wk);
        let vp = t.matmul(v, wv);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(qp, h * dh, dh);
            let kh = t.slice_cols(kp, h * dh, dh);
            let vh = t.slice_cols(vp, h * dh, dh);
            let scores = t.matmul_t(qh, kh);
            let scores = t.scale(scores, scale);
            let probs = match keep {
                Some(m) => t.masked_softmax(scores, m),
                None => t.softmax(scores),
            };
            outs.push(t.matmul(probs, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        let wo = t.param(self.wo);
        Ok(t.matmul(cat, wo))
    }
}

/// `ReLU(x W1 + b1) W2 + b2`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), d_model, inner, true, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), inner, d_model, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, dropout: f64) -> Var {
        let h = self.lin1.forward(t, x);
        let h = t.relu(h);
        let h = t.dropout(h, dropout);
        self.lin2.forward(t, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            heads: 2,
            layers: 2,
            ffn_dim: 300,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm transformer encoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("{name}.layer{i}");
            layers.push(EncoderLayer {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), cfg.d_model),
                attn: MultiHeadAttention::new(
                    store,
                    &format!("{p}.attn"),
                    cfg.d_model,
                    cfg.heads,
                    rng,
                )?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d_model),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.ffn_dim, rng),
            });
        }
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_model);
        Ok(Self {
            cfg,
            layers,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes `x` (n × d_model, already embedded). Keys flagged false in
    /// `key_keep` are invisible to attention.
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        key_keep: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let n = t.shape(x).0;
        let mask = attention_mask(n, n, false, key_keep);
        let mut h = t.dropout(x, self.cfg.dropout);
        for layer in &self.layers {
            let normed = layer.ln_attn.forward(t, h);
            let a = layer.attn.forward(t, normed, normed, normed, mask.as_ref())?;
            let a = t.dropout(a, self.cfg.dropout);
            h = t.add(h, a);
            let normed = layer.ln_ffn.forward(t, h);
            let f = layer.ffn.forward(t, normed, self.cfg.dropout);
            let f = t.dropout(f, self.cfg.dropout);
            h = t.add(h, f);
        }
        Ok(self.final_ln.forward(t, h))
    }
}

/// Sinusoidal position encodings, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Mat {
    Mat::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Looks up token embeddings and adds position encodings.
pub fn embed_with_positions(t: &mut Tape, table: ParamId, ids: &[usize]) -> Var {
    let table = t.param(table);
    let e = t.gather_rows(table, ids);
    let d = t.shape(e).1;
    let pos = t.constant(sinusoidal_positions(ids.len(), d));
    t.add(e, pos)
}
