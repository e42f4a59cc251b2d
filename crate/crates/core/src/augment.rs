//! Text-oriented augmentation: draw two short character strings into the
//! left-top and right-bottom corners in distinct colors, and ask questions
//! whose answers follow from the overlay alone.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const MAX_TEXT_LEN: usize = 5;

/// 5x7 bitmaps, one row per byte, most significant of the low five bits
/// is the leftmost pixel.
#[rustfmt::skip]
const FONT: [[u8; GLYPH_H]; 36] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110], // B
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110], // C
    [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110], // D
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // E
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000], // F
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111], // G
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // H
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // I
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100], // J
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001], // K
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // L
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001], // M
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001], // N
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // O
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000], // P
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101], // Q
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001], // R
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110], // S
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // T
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // U
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100], // V
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010], // W
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001], // X
    [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100], // Y
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // Z
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Bitmap for a character of [`CHARSET`].
pub fn glyph(ch: char) -> Option<&'static [u8; GLYPH_H]> {
    CHARSET.find(ch).map(|i| &FONT[i])
}

pub fn glyph_pixel_count(ch: char) -> Option<usize> {
    glyph(ch).map(|rows| rows.iter().map(|r| r.count_ones() as usize).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 8] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Cyan,
        PaletteColor::Magenta,
        PaletteColor::White,
        PaletteColor::Orange,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            PaletteColor::Red => [1.0, 0.0, 0.0],
            PaletteColor::Green => [0.0, 1.0, 0.0],
            PaletteColor::Blue => [0.0, 0.0, 1.0],
            PaletteColor::Yellow => [1.0, 1.0, 0.0],
            PaletteColor::Cyan => [0.0, 1.0, 1.0],
            PaletteColor::Magenta => [1.0, 0.0, 1.0],
            PaletteColor::White => [1.0, 1.0, 1.0],
            PaletteColor::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Cyan => "cyan",
            PaletteColor::Magenta => "magenta",
            PaletteColor::White => "white",
            PaletteColor::Orange => "orange",
        }
    }
}

impl fmt::Display for PaletteColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    LeftTop,
    RightBottom,
}

impl Corner {
    pub fn phrase(self) -> &'static str {
        match self {
            Corner::LeftTop => "left-top",
            Corner::RightBottom => "right-bottom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerText {
    pub text: String,
    pub color: PaletteColor,
    pub glyph_scale: usize,
}

impl CornerText {
    /// `(width, height)` of the rendered string in pixels.
    pub fn box_size(&self) -> (usize, usize) {
        let n = self.text.chars().count();
        let s = self.glyph_scale;
        if n == 0 {
            return (0, 0);
        }
        (n * (GLYPH_W + 1) * s - s, GLYPH_H * s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub left_top: CornerText,
    pub right_bottom: CornerText,
}

impl OverlaySpec {
    pub fn corner(&self, c: Corner) -> &CornerText {
        match c {
            Corner::LeftTop => &self.left_top,
            Corner::RightBottom => &self.right_bottom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.left_top.color == self.right_bottom.color {
            return Err(Error::Argument("both corners use the same color".into()));
        }
        for c in [&self.left_top, &self.right_bottom] {
            if c.glyph_scale == 0 {
                return Err(Error::Argument("glyph scale must be positive".into()));
            }
            if c.text.chars().count() > MAX_TEXT_LEN {
                return Err(Error::Argument(format!("`{}` longer than {MAX_TEXT_LEN} characters", c.text)));
            }
            if let Some(bad) = c.text.chars().find(|&ch| glyph(ch).is_none()) {
                return Err(Error::Argument(format!("no glyph for `{bad}`")));
            }
        }
        Ok(())
    }

    /// Top-left pixel of each corner's box, checked to lie inside its
    /// quadrant of an `h x w` image.
    pub fn placement(&self, h: usize, w: usize) -> Result<[(usize, usize); 2]> {
        let (qh, qw) = (h / 2, w / 2);
        let lt = &self.left_top;
        let (bw, bh) = lt.box_size();
        let m = lt.glyph_scale;
        if m + bw > qw || m + bh > qh {
            return Err(Error::Argument(format!("{h}x{w} image too small for left-top `{}`", lt.text)));
        }
        let rb = &self.right_bottom;
        let (bw2, bh2) = rb.box_size();
        let m2 = rb.glyph_scale;
        if bw2 + m2 > w - qw || bh2 + m2 > h - qh {
            return Err(Error::Argument(format!("{h}x{w} image too small for right-bottom `{}`", rb.text)));
        }
        Ok([(m, m), (h - m2 - bh2, w - m2 - bw2)])
    }
}

/// Draws both corner strings; every pixel outside the glyph strokes keeps
/// its value.
pub fn render_overlay(img: &Tensor, spec: &OverlaySpec) -> Result<Tensor> {
    spec.validate()?;
    let [c, h, w] = img.shape()[..] else {
        return Err(shape_err!("expected a [3, h, w] image, got {:?}", img.shape()));
    };
    if c != 3 {
        return Err(shape_err!("overlay needs 3 channels, got {c}"));
    }
    let origins = spec.placement(h, w)?;
    let mut out = img.clone();
    for (corner, (y0, x0)) in [&spec.left_top, &spec.right_bottom].into_iter().zip(origins) {
        let s = corner.glyph_scale;
        let rgb = corner.color.rgb();
        for (k, ch) in corner.text.chars().enumerate() {
            let bitmap = glyph(ch).expect("validated");
            let gx = x0 + k * (GLYPH_W + 1) * s;
            for (gy, bits) in bitmap.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 0 {
                        continue;
                    }
                    for dy in 0..s {
                        for dx in 0..s {
                            let (y, x) = (y0 + gy * s + dy, gx + col * s + dx);
                            for (ch_i, &v) in rgb.iter().enumerate() {
                                out.set(&[ch_i, y, x], v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Identity,
    Color,
    Count,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Identity, Template::Color, Template::Count];

    pub fn question(self, corner: Corner) -> String {
        let at = corner.phrase();
        match self {
            Template::Identity => format!("What character is situated at the {at} of the image?"),
            Template::Color => format!("What is the color of the characters located at the {at} of the image?"),
            Template::Count => format!("How many characters are present in the {at} region of the image?"),
        }
    }

    /// The answer as determined by the overlay spec alone.
    pub fn answer(self, spec: &OverlaySpec, corner: Corner) -> String {
        let c = spec.corner(corner);
        match self {
            Template::Identity => c.text.clone(),
            Template::Color => c.color.name().to_string(),
            Template::Count => c.text.chars().count().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub template: Template,
    pub corner: Corner,
}

impl QaPair {
    pub fn new(spec: &OverlaySpec, template: Template, corner: Corner) -> Self {
        Self { question: template.question(corner), answer: template.answer(spec, corner), template, corner }
    }

    /// Re-derives the answer from `spec` and compares.
    pub fn is_sound(&self, spec: &OverlaySpec) -> bool {
        self.question == self.template.question(self.corner) && self.answer == self.template.answer(spec, self.corner)
    }
}

/// One question per template, each about a randomly chosen corner.
pub fn generate_qa(spec: &OverlaySpec, rng: &mut SeedRng) -> Vec<QaPair> {
    Template::ALL
        .into_iter()
        .map(|t| {
            let corner = if rng.range(0, 2) == 0 { Corner::LeftTop } else { Corner::RightBottom };
            QaPair::new(spec, t, corner)
        })
        .collect()
}

/// Random overlay that fits an `h x w` image: 1-5 characters per corner
/// (fewer when the quadrant is narrow), two distinct palette colors.
pub fn random_spec(h: usize, w: usize, rng: &mut SeedRng) -> Result<OverlaySpec> {
    let scale = (h.min(w) / 64).max(1);
    // margin + n glyph advances minus the trailing gap must fit the quadrant
    let max_len = (w / 2) / ((GLYPH_W + 1) * scale);
    let max_len = max_len.min(MAX_TEXT_LEN);
    if max_len == 0 || h / 2 < (GLYPH_H + 1) * scale {
        return Err(Error::Argument(format!("{h}x{w} image too small for any overlay")));
    }
    let text = |rng: &mut SeedRng| {
        let n = rng.range(1, max_len + 1);
        (0..n).map(|_| CHARSET.as_bytes()[rng.range(0, CHARSET.len())] as char).collect::<String>()
    };
    let a = rng.range(0, PaletteColor::ALL.len());
    let b = (a + rng.range(1, PaletteColor::ALL.len())) % PaletteColor::ALL.len();
    let left_top = CornerText { text: text(rng), color: PaletteColor::ALL[a], glyph_scale: scale };
    let right_bottom = CornerText { text: text(rng), color: PaletteColor::ALL[b], glyph_scale: scale };
    let spec = OverlaySpec { left_top, right_bottom };
    spec.placement(h, w)?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentedSample {
    #[serde(skip)]
    pub image: Tensor,
    pub spec: OverlaySpec,
    pub qa: QaPair,
}

/// `n_pairs` samples; sample `i` overlays base image `i mod len` and keeps
/// one of its three generated questions.
pub fn augment_corpus(images: &[Tensor], n_pairs: usize, rng: &SeedRng) -> Result<Vec<AugmentedSample>> {
    if images.is_empty() || n_pairs == 0 {
        return Err(Error::Argument("augmentation needs at least one image and one pair".into()));
    }
    (0..n_pairs)
        .map(|i| {
            let mut r = rng.split_index(i as u64);
            let base = &images[i % images.len()];
            let (h, w) = (base.shape()[1], base.shape()[2]);
            let spec = random_spec(h, w, &mut r)?;
            let image = render_overlay(base, &spec)?;
            let mut qas = generate_qa(&spec, &mut r);
            let qa = qas.swap_remove(r.range(0, qas.len()));
            Ok(AugmentedSample { image, spec, qa })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lt: &str, lc: PaletteColor, rb: &str, rc: PaletteColor) -> OverlaySpec {
        OverlaySpec {
            left_top: CornerText { text: lt.into(), color: lc, glyph_scale: 1 },
            right_bottom: CornerText { text: rb.into(), color: rc, glyph_scale: 1 },
        }
    }

    #[test]
    fn qa_examples() {
        let s = spec("AB", PaletteColor::Red, "XYZ", PaletteColor::Blue);
        assert_eq!(QaPair::new(&s, Template::Count, Corner::LeftTop).answer, "2");
        assert_eq!(QaPair::new(&s, Template::Color, Corner::RightBottom).answer, "blue");
        assert_eq!(QaPair::new(&s, Template::Identity, Corner::LeftTop).answer, "AB");
        assert_eq!(
            QaPair::new(&s, Template::Count, Corner::LeftTop).question,
            "How many characters are present in the left-top region of the image?"
        );
    }

    #[test]
    fn empty_text_leaves_image_unchanged() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f64 / 7.0);
        let s = spec("", PaletteColor::Red, "", PaletteColor::Green);
        assert_eq!(render_overlay(&img, &s).unwrap(), img);
    }

    #[test]
    fn red_pixel_count_matches_bitmap() {
        let img = Tensor::zeros(&[3, 32, 32]);
        for scale in [1, 2] {
            let mut s = spec("A", PaletteColor::Red, "", PaletteColor::Blue);
            s.left_top.glyph_scale = scale;
            let out = render_overlay(&img, &s).unwrap();
            let red = (0..32 * 32)
                .filter(|&p| out.data()[p] == 1.0 && out.data()[1024 + p] == 0.0 && out.data()[2048 + p] == 0.0)
                .count();
            assert_eq!(red, glyph_pixel_count('A').unwrap() * scale * scale);
        }
        assert_eq!(glyph_pixel_count('A'), Some(18));
    }

    #[test]
    fn too_small_image_rejected() {
        let s = spec("ABCDE", PaletteColor::Red, "X", PaletteColor::Blue);
        assert!(matches!(render_overlay(&Tensor::zeros(&[3, 16, 16]), &s), Err(Error::Argument(_))));
    }

    #[test]
    fn same_color_rejected() {
        let s = spec("A", PaletteColor::Red, "B", PaletteColor::Red);
        assert!(s.validate().is_err());
    }

    #[test]
    fn every_charset_glyph_defined() {
        assert_eq!(FONT.len(), CHARSET.len());
        for ch in CHARSET.chars() {
            let bits = glyph(ch).unwrap();
            assert!(bits.iter().all(|&r| r < 32));
            assert!(glyph_pixel_count(ch).unwrap() > 0);
        }
        assert!(glyph('a').is_none());
    }

    #[test]
    fn corpus_is_deterministic() {
        let imgs = vec![Tensor::zeros(&[3, 64, 64]), Tensor::full(&[3, 64, 96], 0.2)];
        let a = augment_corpus(&imgs, 12, &SeedRng::new(3)).unwrap();
        let b = augment_corpus(&imgs, 12, &SeedRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.qa.is_sound(&s.spec)));
    }
}
