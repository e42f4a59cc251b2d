//! Building blocks shared by the vision encoder and the language decoder.

use std::rc::Rc;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bucket, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Truncated-normal tensor with the given std.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut SeedRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.trunc_normal(std))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `[d_in, d_out]` weight plus zero bias.
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, d_in: usize, d_out: usize, rng: &mut SeedRng) -> Self {
        let weight = store.add(format!("{name}.weight"), bucket, trunc_normal(&[d_in, d_out], INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), bucket, Tensor::zeros(&[d_out]));
        Self { weight, bias: Some(bias) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), bucket, Tensor::full(&[d], 1.0));
        let bias = store.add(format!("{name}.bias"), bucket, Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, d_in: usize, hidden: usize, d_out: usize, rng: &mut SeedRng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), bucket, d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), bucket, hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
/// Keys and values may come from a source of a different width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bucket: Bucket,
        d_model: usize,
        d_source: usize,
        n_heads: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), bucket, d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), bucket, d_source, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), bucket, d_source, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), bucket, d_model, d_model, rng),
            n_heads,
        }
    }

    /// `queries: [t, d_model]`, `source: [s, d_source]`. With a mask, row `i`
    /// of the queries attends only where the mask allows; rows with nothing
    /// allowed produce a zero context (before the output projection bias).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        source: Var,
        mask: Option<&Rc<AttnMask>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, source)?;
        let v = self.v.forward(g, store, source)?;
        let d = g.shape(q)[1];
        if d % self.n_heads != 0 {
            return Err(shape_err!("width {d} not divisible by {} heads", self.n_heads));
        }
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = match mask {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores),
            };
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.out.forward(g, store, ctx)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, d: usize, n_heads: usize, ff_mult: usize, rng: &mut SeedRng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), bucket, d),
            attn: Attention::new(store, &format!("{name}.attn"), bucket, d, d, n_heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), bucket, d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), bucket, d, ff_mult * d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&Rc<AttnMask>>) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [Some(l.weight), l.bias].into_iter().flatten().collect::<Vec<_>>();
        let mut ids = vec![self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias];
        for l in [&self.attn.q, &self.attn.k, &self.attn.v, &self.attn.out, &self.mlp.fc1, &self.mlp.fc2] {
            ids.extend(lin(l));
        }
        ids
    }
}
