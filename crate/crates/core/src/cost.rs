//! Sequence-length and attention-cost arithmetic for concatenating visual
//! tokens into the decoder versus feeding them through cross-attention.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::insertion_schedule;
use crate::error::{Error, Result};
use crate::tiling::TileLayout;
use crate::vision::vit_token_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Concat,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationScheme {
    pub kind: Integration,
    pub text_len: usize,
    pub visual_tokens: usize,
    pub n_layers: usize,
    pub xattn_interval: usize,
    pub d_model: usize,
}

impl IntegrationScheme {
    pub fn validate(&self) -> Result<()> {
        if self.text_len == 0 || self.n_layers == 0 || self.xattn_interval == 0 || self.d_model == 0 {
            return Err(Error::Argument("text length, layers, interval and width must be positive".into()));
        }
        Ok(())
    }

    pub fn with_kind(self, kind: Integration) -> Self {
        Self { kind, ..self }
    }

    pub fn with_visual_tokens(self, visual_tokens: usize) -> Self {
        Self { visual_tokens, ..self }
    }
}

/// Length of the decoder's self-attention sequence.
pub fn llm_sequence_length(s: &IntegrationScheme) -> Result<usize> {
    s.validate()?;
    Ok(match s.kind {
        Integration::Concat => s.text_len + s.visual_tokens,
        Integration::CrossAttention => s.text_len,
    })
}

/// `Q K^T` plus `attn V` multiply-adds of one self-attention layer over
/// `n` tokens, divided by the model width.
pub fn self_attention_cost(n: usize) -> f64 {
    2.0 * (n as f64) * (n as f64)
}

/// Same count for `queries` attending to `keys`.
pub fn cross_attention_cost(queries: usize, keys: usize) -> f64 {
    2.0 * queries as f64 * keys as f64
}

/// Attention multiply-adds over the whole decoder, divided by `d_model`.
pub fn attention_cost(s: &IntegrationScheme) -> Result<f64> {
    let seq = llm_sequence_length(s)?;
    let self_attn = s.n_layers as f64 * self_attention_cost(seq);
    Ok(match s.kind {
        Integration::Concat => self_attn,
        Integration::CrossAttention => {
            let blocks = insertion_schedule(s.n_layers, s.xattn_interval).len();
            self_attn + blocks as f64 * cross_attention_cost(s.text_len, s.visual_tokens)
        }
    })
}

/// Attention multiply-adds in absolute terms.
pub fn attention_flops(s: &IntegrationScheme) -> Result<f64> {
    Ok(attention_cost(s)? * s.d_model as f64)
}

/// Settings shared by every row of a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub patch: usize,
    pub text_len: usize,
    pub n_layers: usize,
    pub xattn_interval: usize,
    pub d_model: usize,
    pub use_cls: bool,
    /// Tile size and grid bound used for the tiled token column.
    pub tile: usize,
    pub max_grid: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { patch: 14, text_len: 128, n_layers: 32, xattn_interval: 4, d_model: 5120, use_cls: true, tile: 448, max_grid: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub resolution: usize,
    /// Grid tiles after snapping a square image of this size.
    pub tiles: usize,
    /// Encoder tokens of one pass at this resolution.
    pub visual_tokens: usize,
    /// `(tiles + 1) * tokens_per_tile` when the image is tiled instead.
    pub tiled_tokens: usize,
    pub concat_seq: usize,
    pub xattn_seq: usize,
    pub concat_cost: f64,
    pub xattn_cost: f64,
}

pub fn cost_row(resolution: usize, cfg: &AnalysisConfig) -> Result<CostRow> {
    let visual_tokens = vit_token_count(resolution, cfg.patch, cfg.use_cls)?;
    if cfg.tile == 0 || cfg.max_grid == 0 {
        return Err(Error::Argument("tile size and grid bound must be positive".into()));
    }
    let layout = TileLayout::for_resolution(resolution, resolution, cfg.tile, cfg.max_grid);
    let per_tile = vit_token_count(cfg.tile, cfg.patch, cfg.use_cls)?;
    let scheme = IntegrationScheme {
        kind: Integration::Concat,
        text_len: cfg.text_len,
        visual_tokens,
        n_layers: cfg.n_layers,
        xattn_interval: cfg.xattn_interval,
        d_model: cfg.d_model,
    };
    let xattn = scheme.with_kind(Integration::CrossAttention);
    Ok(CostRow {
        resolution,
        tiles: layout.tile_count(),
        visual_tokens,
        tiled_tokens: layout.vit_passes() * per_tile,
        concat_seq: llm_sequence_length(&scheme)?,
        xattn_seq: llm_sequence_length(&xattn)?,
        concat_cost: attention_cost(&scheme)?,
        xattn_cost: attention_cost(&xattn)?,
    })
}

pub fn report(resolutions: &[usize], cfg: &AnalysisConfig) -> Result<Vec<CostRow>> {
    resolutions.iter().map(|&r| cost_row(r, cfg)).collect()
}

pub const CSV_HEADER: &str = "resolution,tiles,visual_tokens,tiled_tokens,concat_seq,xattn_seq,concat_cost,xattn_cost";

pub fn to_csv(rows: &[CostRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.resolution, r.tiles, r.visual_tokens, r.tiled_tokens, r.concat_seq, r.xattn_seq, r.concat_cost, r.xattn_cost
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<CostRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected cost CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("expected 8 fields in {line:?}")));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
            Ok(CostRow {
                resolution: int(f[0])?,
                tiles: int(f[1])?,
                visual_tokens: int(f[2])?,
                tiled_tokens: int(f[3])?,
                concat_seq: int(f[4])?,
                xattn_seq: int(f[5])?,
                concat_cost: real(f[6])?,
                xattn_cost: real(f[7])?,
            })
        })
        .collect()
}

pub fn to_table(rows: &[CostRow]) -> String {
    let header = ["resolution", "tiles", "visual_tokens", "tiled_tokens", "concat_seq", "xattn_seq", "concat_cost", "xattn_cost"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.resolution.to_string(),
                r.tiles.to_string(),
                r.visual_tokens.to_string(),
                r.tiled_tokens.to_string(),
                r.concat_seq.to_string(),
                r.xattn_seq.to_string(),
                format!("{:.4e}", r.concat_cost),
                format!("{:.4e}", r.xattn_cost),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..8).map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |out: &mut String, fields: &[&str]| {
        let parts: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:>w$}")).collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
