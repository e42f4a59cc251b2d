//! Snap-resize and tiling of high-resolution inputs into base-size tiles
//! plus a global thumbnail.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::resample::resize_image;
use crate::tensor::Tensor;

/// Rounds each axis to the nearest positive multiple of `tile_size` (exact
/// halves round up), then clamps to `[tile_size, max_grid * tile_size]`.
pub fn snap_resolution(h: usize, w: usize, tile_size: usize, max_grid: usize) -> (usize, usize) {
    assert!(tile_size > 0 && max_grid > 0, "tile size and grid bound must be positive");
    let snap = |x: usize| {
        let k = (2 * x + tile_size) / (2 * tile_size);
        k.clamp(1, max_grid) * tile_size
    };
    (snap(h), snap(w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub max_grid: usize,
}

impl TileLayout {
    pub fn for_resolution(h: usize, w: usize, tile_size: usize, max_grid: usize) -> Self {
        let (sh, sw) = snap_resolution(h, w, tile_size, max_grid);
        Self { rows: sh / tile_size, cols: sw / tile_size, tile_size, max_grid }
    }

    /// No grid tiles: the whole image is resized to one tile and encoded in
    /// the thumbnail slot only.
    pub fn single(tile_size: usize, max_grid: usize) -> Self {
        Self { rows: 0, cols: 0, tile_size, max_grid }
    }

    pub fn is_single(&self) -> bool {
        self.rows == 0
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Encoder passes needed: one per tile plus the thumbnail.
    pub fn vit_passes(&self) -> usize {
        self.tile_count() + 1
    }

    pub fn snapped_dims(&self) -> (usize, usize) {
        if self.is_single() {
            return (self.tile_size, self.tile_size);
        }
        (self.rows * self.tile_size, self.cols * self.tile_size)
    }
}

/// Where a segment of the visual feature block came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TileSlot {
    Thumbnail,
    Grid { row: usize, col: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiledImage {
    pub layout: TileLayout,
    /// Row-major.
    pub tiles: Vec<Tile>,
    pub thumbnail: Tensor,
    pub original_dims: (usize, usize),
}

impl TiledImage {
    /// Encoder inputs in canonical order: thumbnail first, then tiles
    /// row-major.
    pub fn segments(&self) -> Vec<(TileSlot, &Tensor)> {
        std::iter::once((TileSlot::Thumbnail, &self.thumbnail))
            .chain(self.tiles.iter().map(|t| (TileSlot::Grid { row: t.row, col: t.col }, &t.pixels)))
            .collect()
    }

    /// Stitches the tiles back into the snapped image.
    pub fn reconstruct(&self) -> Tensor {
        if self.layout.is_single() {
            return self.thumbnail.clone();
        }
        let t = self.layout.tile_size;
        let (h, w) = self.layout.snapped_dims();
        let c = self.thumbnail.shape()[0];
        let mut out = Tensor::zeros(&[c, h, w]);
        for tile in &self.tiles {
            for ch in 0..c {
                for y in 0..t {
                    let src = &tile.pixels.data()[(ch * t + y) * t..(ch * t + y + 1) * t];
                    let o = (ch * h + tile.row * t + y) * w + tile.col * t;
                    out.data_mut()[o..o + t].copy_from_slice(src);
                }
            }
        }
        out
    }
}

/// Fixed-resolution input: one `tile_size` square, no grid.
pub fn single_tile(img: &Tensor, tile_size: usize, max_grid: usize) -> Result<TiledImage> {
    let [_, h, w] = img.shape()[..] else {
        return Err(shape_err!("expected a [c, h, w] image, got {:?}", img.shape()));
    };
    if tile_size == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    Ok(TiledImage {
        layout: TileLayout::single(tile_size, max_grid),
        tiles: Vec::new(),
        thumbnail: resize_image(img, tile_size, tile_size)?,
        original_dims: (h, w),
    })
}

/// Snap, resize, crop non-overlapping tiles row-major, and downsample the
/// snapped image to one extra `tile_size` thumbnail.
pub fn tile_image(img: &Tensor, tile_size: usize, max_grid: usize) -> Result<TiledImage> {
    let [c, h, w] = img.shape()[..] else {
        return Err(shape_err!("expected a [c, h, w] image, got {:?}", img.shape()));
    };
    if tile_size == 0 || max_grid == 0 {
        return Err(Error::Argument("tile size and max grid must be positive".into()));
    }
    let layout = TileLayout::for_resolution(h, w, tile_size, max_grid);
    let (sh, sw) = layout.snapped_dims();
    let snapped = resize_image(img, sh, sw)?;
    let mut tiles = Vec::with_capacity(layout.tile_count());
    for row in 0..layout.rows {
        for col in 0..layout.cols {
            let mut px = Vec::with_capacity(c * tile_size * tile_size);
            for ch in 0..c {
                for y in 0..tile_size {
                    let o = (ch * sh + row * tile_size + y) * sw + col * tile_size;
                    px.extend_from_slice(&snapped.data()[o..o + tile_size]);
                }
            }
            tiles.push(Tile { row, col, pixels: Tensor::new(vec![c, tile_size, tile_size], px)? });
        }
    }
    let thumbnail = resize_image(&snapped, tile_size, tile_size)?;
    Ok(TiledImage { layout, tiles, thumbnail, original_dims: (h, w) })
}
