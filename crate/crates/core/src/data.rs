//! Procedurally rendered training data.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_corpus, PaletteColor, Template};
use crate::decoder::{encode_text, EOS_TOKEN, IMAGE_TOKEN};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// One image-text example. `loss_mask[i]` marks whether token `i` is a
/// prediction target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Option<Tensor>,
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Tokens before the answer; equals `tokens.len() - 1` for captions.
    pub prompt_len: usize,
    pub answer: Option<String>,
    pub template: Option<Template>,
}

impl TrainSample {
    /// `<image>` + caption + `<eos>`, every text token trained.
    pub fn caption(image: Tensor, caption: &str) -> Self {
        let mut tokens = vec![IMAGE_TOKEN];
        tokens.extend(encode_text(caption));
        tokens.push(EOS_TOKEN);
        let mut loss_mask = vec![true; tokens.len()];
        loss_mask[0] = false;
        Self { image: Some(image), prompt_len: 1, tokens, loss_mask, answer: None, template: None }
    }

    /// `<image>` + question + space, then answer + `<eos>`; only the answer
    /// and `<eos>` are trained.
    pub fn qa(image: Tensor, question: &str, answer: &str, template: Option<Template>) -> Self {
        let mut tokens = vec![IMAGE_TOKEN];
        tokens.extend(encode_text(question));
        tokens.extend(encode_text(" "));
        let prompt_len = tokens.len();
        tokens.extend(encode_text(answer));
        tokens.push(EOS_TOKEN);
        let loss_mask = (0..tokens.len()).map(|i| i >= prompt_len).collect();
        Self { image: Some(image), tokens, loss_mask, prompt_len, answer: Some(answer.to_string()), template }
    }

    pub fn image_markers(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == IMAGE_TOKEN).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Caption,
    Vqa,
    TextOverlay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether normalized point `(u, v)` in `[-1, 1]^2` is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Circle => u * u + v * v <= 0.81,
            Shape::Triangle => v >= -0.8 && v <= 0.8 && u.abs() <= (v + 0.8) / 2.0,
            Shape::Cross => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        }
    }
}

/// A single colored shape; rendering and description both read from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scene {
    pub shape: Shape,
    pub color: PaletteColor,
}

impl Scene {
    pub fn random(rng: &mut SeedRng) -> Self {
        Self {
            shape: Shape::ALL[rng.range(0, Shape::ALL.len())],
            color: PaletteColor::ALL[rng.range(0, PaletteColor::ALL.len())],
        }
    }

    pub fn caption(&self) -> String {
        format!("a {} {}", self.color.name(), self.shape.name())
    }

    /// Draws the shape centered on a black `h x w` canvas, spanning half
    /// of the shorter side.
    pub fn render(&self, h: usize, w: usize) -> Tensor {
        let rgb = self.color.rgb();
        let radius = h.min(w) as f64 / 4.0;
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut img = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let v = (y as f64 + 0.5 - cy) / radius;
                let u = (x as f64 + 0.5 - cx) / radius;
                if self.shape.contains(u, v) {
                    for (c, &val) in rgb.iter().enumerate() {
                        img.set(&[c, y, x], val);
                    }
                }
            }
        }
        img
    }
}

/// Image size range for generated samples (inclusive, per axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn fixed(size: usize) -> Self {
        Self { min: size, max: size }
    }

    fn draw(&self, rng: &mut SeedRng) -> usize {
        rng.range(self.min, self.max + 1)
    }
}

pub fn make_synthetic_dataset(kind: DatasetKind, n: usize, sizes: SizeRange, rng: &SeedRng) -> Result<Vec<TrainSample>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    if sizes.min == 0 || sizes.min > sizes.max {
        return Err(Error::Argument(format!("bad image size range {}..={}", sizes.min, sizes.max)));
    }
    let draw = |i: usize| {
        let mut r = rng.split(kind_label(kind)).split_index(i as u64);
        let scene = Scene::random(&mut r);
        let (h, w) = (sizes.draw(&mut r), sizes.draw(&mut r));
        (scene, scene.render(h, w), r)
    };
    match kind {
        DatasetKind::Caption => Ok((0..n)
            .map(|i| {
                let (scene, img, _) = draw(i);
                TrainSample::caption(img, &scene.caption())
            })
            .collect()),
        DatasetKind::Vqa => Ok((0..n)
            .map(|i| {
                let (scene, img, mut r) = draw(i);
                if r.range(0, 2) == 0 {
                    TrainSample::qa(img, "What color is the shape?", scene.color.name(), None)
                } else {
                    TrainSample::qa(img, "What shape is shown?", scene.shape.name(), None)
                }
            })
            .collect()),
        DatasetKind::TextOverlay => {
            let bases = base_images(n, sizes, rng)?;
            let corpus = augment_corpus(&bases, n, &rng.split("overlay"))?;
            Ok(corpus
                .into_iter()
                .map(|s| TrainSample::qa(s.image, &s.qa.question, &s.qa.answer, Some(s.qa.template)))
                .collect())
        }
    }
}

/// Plain rendered scenes used as backgrounds for text overlays.
pub fn base_images(n: usize, sizes: SizeRange, rng: &SeedRng) -> Result<Vec<Tensor>> {
    if sizes.min == 0 || sizes.min > sizes.max {
        return Err(Error::Argument(format!("bad image size range {}..={}", sizes.min, sizes.max)));
    }
    Ok((0..n)
        .map(|i| {
            let mut r = rng.split(kind_label(DatasetKind::TextOverlay)).split_index(i as u64);
            let scene = Scene::random(&mut r);
            let (h, w) = (sizes.draw(&mut r), sizes.draw(&mut r));
            scene.render(h, w)
        })
        .collect())
}

fn kind_label(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Caption => "caption",
        DatasetKind::Vqa => "vqa",
        DatasetKind::TextOverlay => "text_overlay",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        for kind in [DatasetKind::Caption, DatasetKind::Vqa, DatasetKind::TextOverlay] {
            let a = make_synthetic_dataset(kind, 6, SizeRange { min: 64, max: 96 }, &SeedRng::new(5)).unwrap();
            let b = make_synthetic_dataset(kind, 6, SizeRange { min: 64, max: 96 }, &SeedRng::new(5)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|s| s.image_markers() == 1));
        }
    }

    #[test]
    fn caption_matches_rendered_color() {
        let set = make_synthetic_dataset(DatasetKind::Caption, 16, SizeRange::fixed(32), &SeedRng::new(9)).unwrap();
        for s in &set {
            let text: String = s.tokens[1..s.tokens.len() - 1].iter().map(|&t| t as u8 as char).collect();
            let color = PaletteColor::ALL.into_iter().find(|c| text.contains(c.name())).unwrap();
            let img = s.image.as_ref().unwrap();
            let center = [img.get(&[0, 16, 16]), img.get(&[1, 16, 16]), img.get(&[2, 16, 16])];
            assert_eq!(center, color.rgb(), "{text}");
        }
    }

    #[test]
    fn qa_masks_only_answer() {
        let s = TrainSample::qa(Tensor::zeros(&[3, 4, 4]), "Q?", "42", None);
        let trained: Vec<usize> = s.tokens.iter().zip(&s.loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        assert_eq!(trained, vec![b'4' as usize, b'2' as usize, EOS_TOKEN]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(make_synthetic_dataset(DatasetKind::Caption, 0, SizeRange::fixed(32), &SeedRng::new(1)).is_err());
    }
}
