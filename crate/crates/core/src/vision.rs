//! Miniature vision transformer that encodes one square tile and exposes
//! the penultimate layer's hidden states.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{trunc_normal, Linear, TransformerBlock, INIT_STD};
use crate::params::{Bucket, ParamId, ParamStore};
use crate::resample::bilinear_resample_grid;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    /// Side length in pixels of the tiles the encoder currently accepts.
    pub base_resolution: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub channels: usize,
    pub use_cls: bool,
    pub ff_mult: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { base_resolution: 32, patch_size: 4, d_model: 64, n_heads: 4, n_layers: 3, channels: 3, use_cls: true, ff_mult: 4 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.base_resolution % self.patch_size != 0 || self.base_resolution == 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of patch size {}",
                self.base_resolution, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.channels == 0 || self.ff_mult == 0 {
            return Err(Error::Config("vit layers, channels and ff_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.base_resolution / self.patch_size
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.grid() * self.grid() + usize::from(self.use_cls)
    }
}

/// `(resolution / patch)^2`, plus one when a CLS token is prepended.
pub fn vit_token_count(resolution: usize, patch_size: usize, use_cls: bool) -> Result<usize> {
    if patch_size == 0 || resolution == 0 || resolution % patch_size != 0 {
        return Err(Error::Argument(format!("resolution {resolution} not divisible by patch {patch_size}")));
    }
    let side = resolution / patch_size;
    Ok(side * side + usize::from(use_cls))
}

/// Splits a `[c, H, W]` image into row-major patches, each flattened in
/// `(channel, row, col)` order: `[n_patches, c * p * p]`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(shape_err!("patchify expects [c, H, W], got {:?}", image.shape()));
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(shape_err!("image {h}x{w} not divisible into {patch_size}px patches"));
    }
    let (gh, gw, p) = (h / patch_size, w / patch_size, patch_size);
    let src = image.data();
    let mut out = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + py * p + y) * w + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * p * p], out)
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub config: VitConfig,
    pub patch_proj: Linear,
    pub cls_token: Option<ParamId>,
    pub cls_pos: Option<ParamId>,
    /// `[grid, grid, d_model]`
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl Vit {
    pub fn new(config: VitConfig, store: &mut ParamStore, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let b = Bucket::Vit;
        let patch_dim = config.channels * config.patch_size * config.patch_size;
        let patch_proj = Linear::new(store, "vit.patch_proj", b, patch_dim, d, rng);
        let (cls_token, cls_pos) = if config.use_cls {
            (
                Some(store.add("vit.cls_token", b, trunc_normal(&[1, d], INIT_STD, rng))),
                Some(store.add("vit.cls_pos", b, Tensor::zeros(&[1, d]))),
            )
        } else {
            (None, None)
        };
        let grid = config.grid();
        let pos_embed = store.add("vit.pos_embed", b, trunc_normal(&[grid, grid, d], INIT_STD, rng));
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(store, &format!("vit.blocks.{i}"), b, d, config.n_heads, config.ff_mult, rng))
            .collect();
        Ok(Self { config, patch_proj, cls_token, cls_pos, pos_embed, blocks })
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.config.tokens_per_tile()
    }

    /// Hidden states after block `n_layers - 2`, i.e. the input to the last
    /// block: `[tokens_per_tile, d_model]` with CLS (when enabled) at row 0.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tile: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let r = cfg.base_resolution;
        if tile.shape() != [cfg.channels, r, r] {
            return Err(Error::Config(format!(
                "tile shape {:?} does not match the encoder's {}x{}x{} input; \
                 call extend_resolution to interpolate position embeddings first",
                tile.shape(),
                cfg.channels,
                r,
                r
            )));
        }
        let grid = store.value(self.pos_embed).shape()[0];
        if grid * cfg.patch_size != r {
            return Err(Error::Config(format!(
                "position grid {grid} does not cover resolution {r}; interpolate before encoding"
            )));
        }
        let patches = g.constant(patchify(tile, cfg.patch_size)?);
        let x = self.patch_proj.forward(g, store, patches)?;
        let pos = g.param(store, self.pos_embed);
        let pos = g.reshape(pos, &[grid * grid, cfg.d_model])?;
        let mut x = g.add(x, pos)?;
        if let (Some(tok), Some(tok_pos)) = (self.cls_token, self.cls_pos) {
            let tok = g.param(store, tok);
            let tok_pos = g.param(store, tok_pos);
            let cls = g.add(tok, tok_pos)?;
            x = g.concat_rows(&[cls, x])?;
        }
        for block in &self.blocks[..cfg.n_layers - 1] {
            x = block.forward(g, store, x, None)?;
        }
        Ok(x)
    }

    /// Resamples the position grid so the encoder accepts tiles of
    /// `new_resolution` pixels. The CLS position and all other weights are
    /// left untouched.
    pub fn extend_resolution(&mut self, store: &mut ParamStore, new_resolution: usize) -> Result<()> {
        let p = self.config.patch_size;
        if new_resolution == 0 || new_resolution % p != 0 {
            return Err(Error::Argument(format!("resolution {new_resolution} not divisible by patch {p}")));
        }
        let new_grid = new_resolution / p;
        let current = store.value(self.pos_embed);
        if current.shape()[0] != new_grid || current.shape()[1] != new_grid {
            let resampled = bilinear_resample_grid(current, new_grid, new_grid)?;
            store.replace_value(self.pos_embed, resampled);
        }
        self.config.base_resolution = new_resolution;
        Ok(())
    }

    /// Parameters of the final block, which never influence the output.
    pub fn unused_final_block(&self) -> Vec<ParamId> {
        self.blocks.last().map(TransformerBlock::param_ids).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(vit_token_count(1344, 14, true).unwrap(), 9217);
        assert_eq!(vit_token_count(224, 14, true).unwrap(), 257);
        assert_eq!(vit_token_count(448, 14, true).unwrap(), 1025);
        assert_eq!(vit_token_count(448, 14, false).unwrap(), 1024);
        assert!(vit_token_count(450, 14, true).is_err());
    }

    #[test]
    fn patchify_orders_row_major() {
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);

        let whole = patchify(&img, 4).unwrap();
        assert_eq!(whole.shape(), &[1, 16]);
        assert_eq!(whole.data(), img.data());

        let rgb = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&rgb, 4).unwrap().shape(), &[64, 48]);
        assert!(patchify(&rgb, 5).is_err());
    }

    fn toy(seed: u64) -> (ParamStore, Vit) {
        let mut store = ParamStore::new();
        let vit = Vit::new(VitConfig::default(), &mut store, &mut SeedRng::new(seed)).unwrap();
        (store, vit)
    }

    #[test]
    fn output_has_tokens_per_tile_rows() {
        let (store, vit) = toy(1);
        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &Tensor::full(&[3, 32, 32], 0.5)).unwrap();
        assert_eq!(g.shape(out), &[65, 64]);
    }

    #[test]
    fn wrong_resolution_is_config_error() {
        let (store, vit) = toy(1);
        let mut g = Graph::new();
        let err = vit.forward(&mut g, &store, &Tensor::zeros(&[3, 64, 64])).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn two_layers_means_one_block() {
        let cfg = VitConfig { n_layers: 2, ..VitConfig::default() };
        let mut store = ParamStore::new();
        let vit = Vit::new(cfg, &mut store, &mut SeedRng::new(3)).unwrap();
        let tile = Tensor::from_fn(&[3, 32, 32], |i| (i % 17) as f64 / 17.0);
        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &tile).unwrap();

        // replay by hand: embeddings then exactly one block
        let mut h = Graph::new();
        let patches = h.constant(patchify(&tile, 4).unwrap());
        let x = vit.patch_proj.forward(&mut h, &store, patches).unwrap();
        let pos = h.param(&store, vit.pos_embed);
        let pos = h.reshape(pos, &[64, 64]).unwrap();
        let x = h.add(x, pos).unwrap();
        let tok = h.param(&store, vit.cls_token.unwrap());
        let tp = h.param(&store, vit.cls_pos.unwrap());
        let cls = h.add(tok, tp).unwrap();
        let x = h.concat_rows(&[cls, x]).unwrap();
        let x = vit.blocks[0].forward(&mut h, &store, x, None).unwrap();
        assert_eq!(g.value(out), h.value(x));
    }

    #[test]
    fn zero_everything_gives_zero_tokens() {
        let (mut store, vit) = toy(2);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let is_gain = p.name.ends_with(".gain");
            p.value.data_mut().fill(if is_gain { 1.0 } else { 0.0 });
        }
        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_block_does_not_affect_output() {
        let (mut store, vit) = toy(4);
        let tile = Tensor::from_fn(&[3, 32, 32], |i| ((i * 31) % 101) as f64 / 101.0);
        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &tile).unwrap();
        let before = g.value(out).clone();
        for id in vit.unused_final_block() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = *v * -3.0 + 0.7);
        }
        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &tile).unwrap();
        let after = g.value(out).clone();
        assert_eq!(before, after);
    }

    #[test]
    fn extend_resolution_resamples_only_pos_grid() {
        let (mut store, mut vit) = toy(5);
        let before = store.clone();
        vit.extend_resolution(&mut store, 32).unwrap();
        assert_eq!(store.value(vit.pos_embed), before.value(vit.pos_embed));

        vit.extend_resolution(&mut store, 64).unwrap();
        let pe = store.value(vit.pos_embed);
        assert_eq!(pe.shape(), &[16, 16, 64]);
        let old = before.value(vit.pos_embed);
        for c in 0..64 {
            assert_eq!(pe.get(&[0, 0, c]), old.get(&[0, 0, c]));
            assert_eq!(pe.get(&[15, 15, c]), old.get(&[7, 7, c]));
            assert_eq!(pe.get(&[0, 15, c]), old.get(&[0, 7, c]));
        }
        for (id, p) in store.iter() {
            if id != vit.pos_embed {
                assert_eq!(p.value, before.get(id).value, "{} changed", p.name);
            }
        }
        assert!(vit.extend_resolution(&mut store, 66).is_err());

        let mut g = Graph::new();
        let out = vit.forward(&mut g, &store, &Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!(g.shape(out), &[257, 64]);
    }
}
