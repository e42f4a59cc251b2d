//! Causal byte-level decoder with tanh-gated cross-attention blocks placed
//! in front of every `xattn_interval`-th layer.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Attention, LayerNorm, Mlp, TransformerBlock, INIT_STD};
use crate::params::{Bucket, ParamId, ParamStore};
use crate::pipeline::VisualFeatures;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const IMAGE_TOKEN: usize = 256;
pub const EOS_TOKEN: usize = 257;

/// Byte-level tokenization: one id per byte.
pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode_text`]; reserved ids are dropped.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub xattn_interval: usize,
    pub d_visual: usize,
    pub ff_mult: usize,
    /// Std of the tied token embedding at initialization.
    pub embed_init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 258,
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            max_seq_len: 256,
            xattn_interval: 4,
            d_visual: 48,
            ff_mult: 4,
            embed_init_std: 0.12,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq_len, self.xattn_interval, self.d_visual, self.ff_mult];
        if positive.contains(&0) {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.xattn_interval > self.n_layers {
            return Err(Error::Config(format!("interval {} exceeds {} layers", self.xattn_interval, self.n_layers)));
        }
        Ok(())
    }
}

/// Decoder layers that get a gated cross-attention block in front of them.
pub fn insertion_schedule(n_layers: usize, interval: usize) -> Vec<usize> {
    assert!(interval >= 1, "interval must be at least 1");
    (0..n_layers).step_by(interval).collect()
}

/// For each text position, the image it may attend to (the most recent
/// `<image>` marker at or before it), or `None` before the first image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MediaMask {
    per_token: Vec<Option<usize>>,
}

impl MediaMask {
    pub fn new(per_token: Vec<Option<usize>>) -> Result<Self> {
        let mut last: Option<usize> = None;
        for (i, &m) in per_token.iter().enumerate() {
            if last.is_some() && (m.is_none() || m < last) {
                return Err(Error::Argument(format!("media index decreases at position {i}")));
            }
            last = m.or(last);
        }
        Ok(Self { per_token })
    }

    pub fn from_tokens(ids: &[usize]) -> Self {
        let mut seen = 0usize;
        let per_token = ids
            .iter()
            .map(|&id| {
                if id == IMAGE_TOKEN {
                    seen += 1;
                }
                seen.checked_sub(1)
            })
            .collect();
        Self { per_token }
    }

    pub fn none(len: usize) -> Self {
        Self { per_token: vec![None; len] }
    }

    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<usize> {
        self.per_token[pos]
    }
}

/// Visual tokens of one or more images stacked row-wise, with the image
/// index of every row.
#[derive(Clone, Debug)]
pub struct MediaTokens {
    pub tokens: Var,
    pub image_of: Vec<usize>,
}

impl MediaTokens {
    pub fn from_features(g: &mut Graph, images: &[VisualFeatures]) -> Result<Self> {
        let parts: Vec<Var> = images.iter().map(|f| f.tokens).collect();
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let image_of = images.iter().enumerate().flat_map(|(i, f)| std::iter::repeat(i).take(f.len())).collect();
        Ok(Self { tokens, image_of })
    }

    pub fn images(&self) -> usize {
        self.image_of.last().map_or(0, |&i| i + 1)
    }
}

#[derive(Clone, Debug)]
pub struct GatedXAttnBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub attn_gate: ParamId,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
    pub ff_gate: ParamId,
}

impl GatedXAttnBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut SeedRng) -> Self {
        let b = Bucket::GatedBlocks;
        let d = cfg.d_model;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), b, d),
            attn: Attention::new(store, &format!("{name}.attn"), b, d, cfg.d_visual, cfg.n_heads, rng),
            attn_gate: store.add(format!("{name}.attn_gate"), b, Tensor::zeros(&[d])),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), b, d),
            ff: Mlp::new(store, &format!("{name}.ff"), b, d, cfg.ff_mult * d, d, rng),
            ff_gate: store.add(format!("{name}.ff_gate"), b, Tensor::zeros(&[d])),
        }
    }

    /// Ungated cross-attention output. Rows whose mask entry is `None` are
    /// exactly zero.
    pub fn cross_attention(&self, g: &mut Graph, store: &ParamStore, hidden: Var, media: &MediaTokens, mask: &MediaMask) -> Result<Var> {
        let t = g.shape(hidden)[0];
        if mask.len() != t {
            return Err(Error::Contract(format!("media mask covers {} positions, hidden has {t}", mask.len())));
        }
        let available = media.images();
        if let Some(need) = (0..t).filter_map(|p| mask.get(p)).find(|&i| i >= available) {
            return Err(Error::Contract(format!("text attends to image {need} but only {available} images were supplied")));
        }
        let n = media.image_of.len();
        let attn_mask = Rc::new(AttnMask::from_fn(t, n, |r, c| mask.get(r) == Some(media.image_of[c])));
        let q = self.ln_attn.forward(g, store, hidden)?;
        let out = self.attn.forward(g, store, q, media.tokens, Some(&attn_mask))?;
        if (0..t).all(|p| mask.get(p).is_some()) {
            return Ok(out);
        }
        let d = g.shape(out)[1];
        let keep = Tensor::from_fn(&[t, d], |i| if mask.get(i / d).is_some() { 1.0 } else { 0.0 });
        let keep = g.constant(keep);
        g.mul(out, keep)
    }

    /// `h + tanh(attn_gate) * xattn(h)`, then `h + tanh(ff_gate) * ff(ln(h))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, media: &MediaTokens, mask: &MediaMask) -> Result<Var> {
        let a = self.cross_attention(g, store, hidden, media, mask)?;
        let gate = g.param(store, self.attn_gate);
        let gate = g.tanh(gate);
        let a = g.mul_row(a, gate)?;
        let h = g.add(hidden, a)?;
        let f = self.ln_ff.forward(g, store, h)?;
        let f = self.ff.forward(g, store, f)?;
        let gate = g.param(store, self.ff_gate);
        let gate = g.tanh(gate);
        let f = g.mul_row(f, gate)?;
        g.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerBlock>,
    /// Gated blocks paired with the layer index they precede.
    pub xattn: Vec<(usize, GatedXAttnBlock)>,
    pub final_ln: LayerNorm,
}

impl Decoder {
    pub fn new(config: DecoderConfig, store: &mut ParamStore, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let b = Bucket::Decoder;
        let tok_embed = store.add("decoder.tok_embed", b, trunc_normal(&[config.vocab_size, d], config.embed_init_std, &mut rng.split("tok")));
        let pos_embed = store.add("decoder.pos_embed", b, trunc_normal(&[config.max_seq_len, d], INIT_STD, &mut rng.split("pos")));
        let mut lrng = rng.split("layers");
        let layers = (0..config.n_layers)
            .map(|i| TransformerBlock::new(store, &format!("decoder.layers.{i}"), b, d, config.n_heads, config.ff_mult, &mut lrng))
            .collect();
        let final_ln = LayerNorm::new(store, "decoder.final_ln", b, d);
        let mut xrng = rng.split("xattn");
        let xattn = insertion_schedule(config.n_layers, config.xattn_interval)
            .into_iter()
            .map(|layer| (layer, GatedXAttnBlock::new(store, &format!("xattn.{layer}"), &config, &mut xrng)))
            .collect();
        Ok(Self { config, tok_embed, pos_embed, layers, xattn, final_ln })
    }

    /// Next-token logits `[t, vocab]`. With `media == None` the gated blocks
    /// are skipped entirely.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], media: Option<&MediaTokens>, mask: &MediaMask) -> Result<Var> {
        let t = ids.len();
        if t == 0 || t > self.config.max_seq_len {
            return Err(Error::Argument(format!("sequence length {t} outside 1..={}", self.config.max_seq_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = g.param(store, self.tok_embed);
        let x = g.embedding(table, ids)?;
        let pos = g.param(store, self.pos_embed);
        let pos = g.slice_rows(pos, 0, t)?;
        let mut x = g.add(x, pos)?;
        let causal = Rc::new(AttnMask::causal(t));
        let mut blocks = self.xattn.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((_, block)) = blocks.next_if(|(at, _)| *at == i) {
                if let Some(m) = media {
                    x = block.forward(g, store, x, m, mask)?;
                }
            }
            x = layer.forward(g, store, x, Some(&causal))?;
        }
        let x = self.final_ln.forward(g, store, x)?;
        let out = g.transpose(table)?;
        g.matmul(x, out)
    }

    /// Mean `|tanh(gate)|` per gated block: `(layer, attn, ff)`.
    pub fn gate_statistics(&self, store: &ParamStore) -> Vec<GateStat> {
        let stat = |id: ParamId| {
            let v = store.value(id);
            v.data().iter().map(|x| x.tanh().abs()).sum::<f64>() / v.len() as f64
        };
        self.xattn
            .iter()
            .map(|(layer, b)| GateStat { layer: *layer, attn: stat(b.attn_gate), ff: stat(b.ff_gate) })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GateStat {
    pub layer: usize,
    pub attn: f64,
    pub ff: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(insertion_schedule(32, 4), vec![0, 4, 8, 12, 16, 20, 24, 28]);
        assert_eq!(insertion_schedule(8, 4), vec![0, 4]);
        assert_eq!(insertion_schedule(8, 2), vec![0, 2, 4, 6]);
        for n in 1..40 {
            for k in 1..=n {
                assert_eq!(insertion_schedule(n, k).len(), n.div_ceil(k));
            }
        }
    }

    #[test]
    fn media_mask_follows_latest_image() {
        let ids = [65, IMAGE_TOKEN, 66, 67, IMAGE_TOKEN, 68];
        let m = MediaMask::from_tokens(&ids);
        let got: Vec<_> = (0..ids.len()).map(|p| m.get(p)).collect();
        assert_eq!(got, vec![None, Some(0), Some(0), Some(0), Some(1), Some(1)]);
        assert!(MediaMask::new(vec![Some(1), Some(0)]).is_err());
        assert!(MediaMask::new(vec![None, Some(0), None]).is_err());
    }

    #[test]
    fn tokenizer_roundtrip() {
        let ids = encode_text("red circle");
        assert_eq!(ids[0], b'r' as usize);
        assert_eq!(decode_text(&[IMAGE_TOKEN, 104, 105, EOS_TOKEN]), "hi");
    }

    fn toy() -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let dec = Decoder::new(DecoderConfig::default(), &mut store, &mut SeedRng::new(11)).unwrap();
        (store, dec)
    }

    fn media(g: &mut Graph, n: usize, seed: f64) -> MediaTokens {
        let tokens = g.constant(Tensor::from_fn(&[n, 48], |i| (i as f64 * seed).sin()));
        MediaTokens { tokens, image_of: vec![0; n] }
    }

    #[test]
    fn zero_gates_are_identity() {
        let (store, dec) = toy();
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[5, 64], |i| (i as f64 * 0.3).cos()));
        let m = media(&mut g, 7, 0.7);
        let mask = MediaMask::new(vec![Some(0); 5]).unwrap();
        let out = dec.xattn[0].1.forward(&mut g, &store, h, &m, &mask).unwrap();
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn single_visual_token_attention_is_its_value() {
        let (mut store, dec) = toy();
        let block = &dec.xattn[0].1;
        store.get_mut(block.attn_gate).value.data_mut().fill(10.0);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[1, 64], |i| (i as f64).sin()));
        let m = media(&mut g, 1, 0.2);
        let mask = MediaMask::new(vec![Some(0)]).unwrap();
        let out = block.cross_attention(&mut g, &store, h, &m, &mask).unwrap();
        let v = block.attn.v.forward(&mut g, &store, m.tokens).unwrap();
        let expect = block.attn.out.forward(&mut g, &store, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-15);
    }

    #[test]
    fn text_before_first_image_gets_zero_cross_attention() {
        let (store, dec) = toy();
        let block = &dec.xattn[1].1;
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[4, 64], |i| (i as f64 * 0.1).sin()));
        let m = media(&mut g, 3, 0.5);
        let mask = MediaMask::new(vec![None, None, Some(0), Some(0)]).unwrap();
        let out = block.cross_attention(&mut g, &store, h, &m, &mask).unwrap();
        let v = g.value(out);
        assert!(v.row(0).iter().chain(v.row(1)).all(|&x| x == 0.0));
        assert!(v.row(2).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn missing_image_is_contract_error() {
        let (store, dec) = toy();
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 64]));
        let m = media(&mut g, 2, 0.5);
        let mask = MediaMask::new(vec![Some(0), Some(1)]).unwrap();
        assert!(matches!(dec.xattn[0].1.forward(&mut g, &store, h, &m, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_checks_ids_and_length() {
        let (store, dec) = toy();
        let mut g = Graph::new();
        let mask = MediaMask::none(2);
        assert!(matches!(dec.forward(&mut g, &store, &[1, 258], None, &mask), Err(Error::Index(_))));
        let long = vec![1; 257];
        assert!(dec.forward(&mut g, &store, &long, None, &MediaMask::none(257)).is_err());
        let logits = dec.forward(&mut g, &store, &[1, 2], None, &mask).unwrap();
        assert_eq!(g.shape(logits), &[2, 258]);
    }

    #[test]
    fn fresh_gate_statistics_are_zero() {
        let (mut store, dec) = toy();
        assert!(dec.gate_statistics(&store).iter().all(|s| s.attn == 0.0 && s.ff == 0.0));
        store.get_mut(dec.xattn[0].1.ff_gate).value.data_mut().fill(50.0);
        let s = dec.gate_statistics(&store);
        assert!(s[0].ff > 0.99 && s[0].ff <= 1.0);
    }
}
