//! Dynamic-resolution visual path: tile the image, encode every tile and
//! the thumbnail with the ViT, add each tile's 2D slot embedding, project
//! to the decoder's key/value width and concatenate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{trunc_normal, Mlp, INIT_STD};
use crate::params::{Bucket, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::tiling::{single_tile, tile_image, TileLayout, TileSlot, TiledImage};
use crate::vision::Vit;

/// Learned per-row, per-column and thumbnail vectors; slot `(i, j)` is
/// identified by `row[i] + col[j]`.
#[derive(Clone, Debug)]
pub struct TilePosTable {
    pub row_embed: ParamId,
    pub col_embed: ParamId,
    pub thumbnail_embed: ParamId,
    pub max_grid: usize,
}

impl TilePosTable {
    pub fn new(store: &mut ParamStore, max_grid: usize, d: usize, rng: &mut SeedRng) -> Self {
        let b = Bucket::Projector;
        Self {
            row_embed: store.add("tile_pos.row", b, trunc_normal(&[max_grid, d], INIT_STD, rng)),
            col_embed: store.add("tile_pos.col", b, trunc_normal(&[max_grid, d], INIT_STD, rng)),
            thumbnail_embed: store.add("tile_pos.thumbnail", b, trunc_normal(&[1, d], INIT_STD, rng)),
            max_grid,
        }
    }

    fn check(&self, slot: TileSlot) -> Result<()> {
        if let TileSlot::Grid { row, col } = slot {
            if row >= self.max_grid || col >= self.max_grid {
                return Err(Error::Argument(format!(
                    "tile slot ({row}, {col}) outside a {0}x{0} grid",
                    self.max_grid
                )));
            }
        }
        Ok(())
    }

    /// The slot's vector as a plain tensor `[d]`.
    pub fn embedding(&self, store: &ParamStore, slot: TileSlot) -> Result<Tensor> {
        self.check(slot)?;
        let v = match slot {
            TileSlot::Thumbnail => store.value(self.thumbnail_embed).data().to_vec(),
            TileSlot::Grid { row, col } => {
                let r = store.value(self.row_embed).row(row);
                let c = store.value(self.col_embed).row(col);
                r.iter().zip(c).map(|(a, b)| a + b).collect()
            }
        };
        Tensor::new(vec![v.len()], v)
    }

    /// Recorded version of [`Self::embedding`], shaped `[1, d]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, slot: TileSlot) -> Result<Var> {
        self.check(slot)?;
        match slot {
            TileSlot::Thumbnail => Ok(g.param(store, self.thumbnail_embed)),
            TileSlot::Grid { row, col } => {
                let rows = g.param(store, self.row_embed);
                let cols = g.param(store, self.col_embed);
                let r = g.slice_rows(rows, row, 1)?;
                let c = g.slice_rows(cols, col, 1)?;
                g.add(r, c)
            }
        }
    }
}

/// Optional bottleneck that mean-pools each segment's projected tokens into
/// `slots` contiguous groups and adds a learned vector per slot.
#[derive(Clone, Debug)]
pub struct PoolBottleneck {
    pub slots: usize,
    pub slot_embed: ParamId,
}

impl PoolBottleneck {
    fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let n = g.shape(tokens)[0];
        if self.slots > n {
            return Err(shape_err!("cannot pool {n} tokens into {} slots", self.slots));
        }
        let mut pool = Tensor::zeros(&[self.slots, n]);
        for q in 0..self.slots {
            let (lo, hi) = (q * n / self.slots, (q + 1) * n / self.slots);
            for j in lo..hi {
                pool.set(&[q, j], 1.0 / (hi - lo) as f64);
            }
        }
        let pool = g.constant(pool);
        let pooled = g.matmul(pool, tokens)?;
        let slots = g.param(store, self.slot_embed);
        g.add(pooled, slots)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub max_grid: usize,
    /// Projected width handed to the decoder's cross-attention.
    pub d_visual: usize,
    pub projector_hidden: usize,
    /// Adds the tile slot embeddings; off reproduces the no-position ablation.
    pub tile_pos: bool,
    /// Mean-pool bottleneck width per segment; `None` keeps every token.
    pub pool_slots: Option<usize>,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self { max_grid: 3, d_visual: 48, projector_hidden: 64, tile_pos: true, pool_slots: None }
    }
}

/// Projected tokens of one image, thumbnail segment first.
#[derive(Clone, Debug)]
pub struct VisualFeatures {
    pub tokens: Var,
    /// Per token: 0 for the thumbnail, `1 + row * cols + col` for tiles.
    pub segment_ids: Vec<usize>,
    pub tokens_per_segment: usize,
    pub layout: TileLayout,
    pub d_visual: usize,
}

impl VisualFeatures {
    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }
}

/// Vision encoder plus everything between it and the decoder.
#[derive(Clone, Debug)]
pub struct VisionTower {
    pub config: TowerConfig,
    pub vit: Vit,
    pub tile_pos: TilePosTable,
    pub projector: Mlp,
    pub pool: Option<PoolBottleneck>,
}

impl VisionTower {
    pub fn new(config: TowerConfig, vit: Vit, store: &mut ParamStore, rng: &mut SeedRng) -> Result<Self> {
        if config.max_grid == 0 || config.d_visual == 0 || config.projector_hidden == 0 {
            return Err(Error::Config("tower widths and grid bound must be positive".into()));
        }
        let d = vit.config.d_model;
        let tile_pos = TilePosTable::new(store, config.max_grid, d, &mut rng.split("tile_pos"));
        let projector = Mlp::new(store, "projector", Bucket::Projector, d, config.projector_hidden, config.d_visual, &mut rng.split("projector"));
        let pool = match config.pool_slots {
            Some(0) => return Err(Error::Config("pool_slots must be positive".into())),
            Some(q) => Some(PoolBottleneck {
                slots: q,
                slot_embed: store.add("projector.pool_slots", Bucket::Projector, trunc_normal(&[q, config.d_visual], INIT_STD, &mut rng.split("pool"))),
            }),
            None => None,
        };
        Ok(Self { config, vit, tile_pos, projector, pool })
    }

    pub fn tile_size(&self) -> usize {
        self.vit.config.base_resolution
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.pool.as_ref().map_or(self.vit.tokens_per_tile(), |p| p.slots)
    }

    pub fn tile(&self, img: &Tensor) -> Result<TiledImage> {
        tile_image(img, self.tile_size(), self.config.max_grid)
    }

    pub fn tile_single(&self, img: &Tensor) -> Result<TiledImage> {
        single_tile(img, self.tile_size(), self.config.max_grid)
    }

    /// Raw encoder outputs for every segment in canonical order, computed
    /// in the order given by `order` (a permutation of segment indices).
    pub fn vit_segments_in_order(&self, g: &mut Graph, store: &ParamStore, tiled: &TiledImage, order: &[usize]) -> Result<Vec<Var>> {
        let segs = tiled.segments();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..segs.len()).collect::<Vec<_>>() {
            return Err(Error::Argument(format!("{order:?} is not a permutation of {} segments", segs.len())));
        }
        let mut out: Vec<Option<Var>> = vec![None; segs.len()];
        for &s in order {
            out[s] = Some(self.vit.forward(g, store, segs[s].1)?);
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }

    pub fn vit_segments(&self, g: &mut Graph, store: &ParamStore, tiled: &TiledImage) -> Result<Vec<Var>> {
        let order: Vec<usize> = (0..tiled.layout.vit_passes()).collect();
        self.vit_segments_in_order(g, store, tiled, &order)
    }

    /// Two-layer GELU MLP applied token-wise: `[n, d_model] -> [n, d_visual]`.
    pub fn project_features(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let want = self.projector.fc1.in_dim(store);
        let got = g.shape(tokens).get(1).copied().unwrap_or(0);
        if got != want {
            return Err(shape_err!("projector expects width {want}, got {got}"));
        }
        self.projector.forward(g, store, tokens)
    }

    /// Adds slot embeddings, projects, optionally pools, and concatenates
    /// encoder outputs given in canonical segment order.
    pub fn assemble(&self, g: &mut Graph, store: &ParamStore, layout: TileLayout, segments: &[Var]) -> Result<VisualFeatures> {
        if segments.len() != layout.vit_passes() {
            return Err(shape_err!("{} segments for a layout needing {}", segments.len(), layout.vit_passes()));
        }
        let mut projected = Vec::with_capacity(segments.len());
        for (s, &seg) in segments.iter().enumerate() {
            let slot = slot_of(layout, s);
            let x = if self.config.tile_pos {
                let pos = self.tile_pos.embed(g, store, slot)?;
                g.add_row(seg, pos)?
            } else {
                seg
            };
            let y = self.project_features(g, store, x)?;
            let y = match &self.pool {
                Some(p) => p.forward(g, store, y)?,
                None => y,
            };
            projected.push(y);
        }
        let per = g.shape(projected[0])[0];
        let tokens = g.concat_rows(&projected)?;
        let segment_ids = (0..segments.len()).flat_map(|s| std::iter::repeat(s).take(per)).collect();
        Ok(VisualFeatures { tokens, segment_ids, tokens_per_segment: per, layout, d_visual: self.config.d_visual })
    }

    pub fn encode_tiled(&self, g: &mut Graph, store: &ParamStore, tiled: &TiledImage) -> Result<VisualFeatures> {
        let segs = self.vit_segments(g, store, tiled)?;
        self.assemble(g, store, tiled.layout, &segs)
    }

    pub fn encode_image(&self, g: &mut Graph, store: &ParamStore, img: &Tensor) -> Result<VisualFeatures> {
        let tiled = self.tile(img)?;
        self.encode_tiled(g, store, &tiled)
    }
}

/// Slot of canonical segment `s`: 0 is the thumbnail, then tiles row-major.
pub fn slot_of(layout: TileLayout, s: usize) -> TileSlot {
    if s == 0 {
        TileSlot::Thumbnail
    } else {
        TileSlot::Grid { row: (s - 1) / layout.cols, col: (s - 1) % layout.cols }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::VitConfig;

    fn tower(seed: u64, config: TowerConfig) -> (ParamStore, VisionTower) {
        let mut store = ParamStore::new();
        let rng = SeedRng::new(seed);
        let vit = Vit::new(VitConfig::default(), &mut store, &mut rng.split("vit")).unwrap();
        let t = VisionTower::new(config, vit, &mut store, &mut rng.split("tower")).unwrap();
        (store, t)
    }

    #[test]
    fn single_tile_gives_two_segments() {
        let (store, t) = tower(1, TowerConfig::default());
        let mut g = Graph::new();
        let f = t.encode_image(&mut g, &store, &Tensor::full(&[3, 32, 32], 0.25)).unwrap();
        assert_eq!(g.shape(f.tokens), &[130, 48]);
        assert_eq!(f.segment_ids[64], 0);
        assert_eq!(f.segment_ids[65], 1);
    }

    #[test]
    fn zero_params_zero_features() {
        let (mut store, t) = tower(2, TowerConfig::default());
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let fill = if p.name.ends_with(".gain") { 1.0 } else { 0.0 };
            p.value.data_mut().fill(fill);
        }
        let mut g = Graph::new();
        let f = t.encode_image(&mut g, &store, &Tensor::zeros(&[3, 64, 32])).unwrap();
        assert_eq!(g.shape(f.tokens), &[3 * 65, 48]);
        assert!(g.value(f.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slot_embedding_rules() {
        let (store, t) = tower(3, TowerConfig::default());
        let a = t.tile_pos.embedding(&store, TileSlot::Grid { row: 0, col: 1 }).unwrap();
        let b = t.tile_pos.embedding(&store, TileSlot::Grid { row: 1, col: 0 }).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            t.tile_pos.embedding(&store, TileSlot::Grid { row: 3, col: 0 }),
            Err(Error::Argument(_))
        ));

        // identical row and column tables make the slot symmetric
        let mut sym = store.clone();
        let rows = sym.value(t.tile_pos.row_embed).clone();
        sym.get_mut(t.tile_pos.col_embed).value = rows;
        let a = t.tile_pos.embedding(&sym, TileSlot::Grid { row: 0, col: 2 }).unwrap();
        let b = t.tile_pos.embedding(&sym, TileSlot::Grid { row: 2, col: 0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projector_rules() {
        let (mut store, t) = tower(4, TowerConfig::default());
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 64], |i| (i as f64).sin()));
        let y = t.project_features(&mut g, &store, x).unwrap();
        // row-wise map: a batch of one equals the matching row
        let x1 = g.slice_rows(x, 1, 1).unwrap();
        let y1 = t.project_features(&mut g, &store, x1).unwrap();
        assert_eq!(g.value(y).row(1), g.value(y1).data());

        let bad = g.constant(Tensor::zeros(&[2, 10]));
        assert!(matches!(t.project_features(&mut g, &store, bad), Err(Error::Shape(_))));

        for id in [t.projector.fc1.weight, t.projector.fc2.weight] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 64], 3.0));
        let y = t.project_features(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_bottleneck_shrinks_segments() {
        let (store, t) = tower(5, TowerConfig { pool_slots: Some(8), ..TowerConfig::default() });
        let mut g = Graph::new();
        let f = t.encode_image(&mut g, &store, &Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        assert_eq!(f.tokens_per_segment, 8);
        assert_eq!(g.shape(f.tokens), &[5 * 8, 48]);
    }
}
