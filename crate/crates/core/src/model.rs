//! The assembled multimodal model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::TrainSample;
use crate::decoder::{Decoder, DecoderConfig, GateStat, MediaMask, MediaTokens, EOS_TOKEN};
use crate::error::{Error, Result};
use crate::params::{Bucket, ParamStore};
use crate::pipeline::{TowerConfig, VisionTower, VisualFeatures};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::tiling::{TileLayout, TiledImage};
use crate::vision::{Vit, VitConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub tower: TowerConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.decoder.validate()?;
        if self.tower.d_visual != self.decoder.d_visual {
            return Err(Error::Config(format!(
                "projector width {} differs from cross-attention input width {}",
                self.tower.d_visual, self.decoder.d_visual
            )));
        }
        Ok(())
    }

    /// A very small model for smoke runs and tests: 16px tiles, width-16
    /// encoder and decoder with two layers each.
    pub fn tiny() -> Self {
        Self {
            vit: VitConfig { base_resolution: 16, patch_size: 4, d_model: 16, n_heads: 2, n_layers: 2, ..VitConfig::default() },
            tower: TowerConfig { d_visual: 12, projector_hidden: 16, ..TowerConfig::default() },
            decoder: DecoderConfig { d_model: 16, n_heads: 2, n_layers: 2, xattn_interval: 1, d_visual: 12, ..DecoderConfig::default() },
        }
    }

    /// Same architecture with the encoder accepting `resolution`-pixel tiles.
    pub fn at_resolution(&self, resolution: usize) -> Self {
        let mut c = self.clone();
        c.vit.base_resolution = resolution;
        c
    }
}

/// Parameter counts per accounting bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub vit: usize,
    pub decoder: usize,
    pub gated_blocks: usize,
    pub projector: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn as_map(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("vit", self.vit),
            ("decoder", self.decoder),
            ("gated_blocks", self.gated_blocks),
            ("projector", self.projector),
        ])
    }
}

/// Image input at one of three levels of preprocessing.
#[derive(Clone, Copy, Debug)]
pub enum ImageInput<'a> {
    Raw(&'a Tensor),
    Tiled(&'a TiledImage),
    /// Encoder outputs computed earlier under frozen encoder weights.
    Encoded { layout: TileLayout, segments: &'a [Tensor] },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub tower: VisionTower,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let vit = Vit::new(config.vit.clone(), &mut store, &mut rng.split("vit"))?;
        let tower = VisionTower::new(config.tower.clone(), vit, &mut store, &mut rng.split("tower"))?;
        let decoder = Decoder::new(config.decoder.clone(), &mut store, &mut rng.split("decoder"))?;
        Ok(Self { config, seed, store, tower, decoder })
    }

    pub fn encoder_resolution(&self) -> usize {
        self.tower.vit.config.base_resolution
    }

    pub fn extend_resolution(&mut self, new_resolution: usize) -> Result<()> {
        self.tower.vit.extend_resolution(&mut self.store, new_resolution)?;
        self.config.vit.base_resolution = new_resolution;
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, image: ImageInput<'_>) -> Result<VisualFeatures> {
        match image {
            ImageInput::Raw(img) => self.tower.encode_image(g, &self.store, img),
            ImageInput::Tiled(t) => self.tower.encode_tiled(g, &self.store, t),
            ImageInput::Encoded { layout, segments } => {
                let segs: Vec<Var> = segments.iter().map(|t| g.constant(t.clone())).collect();
                self.tower.assemble(g, &self.store, layout, &segs)
            }
        }
    }

    /// Raw encoder outputs of each segment, as plain tensors.
    pub fn encode_segments(&self, tiled: &TiledImage) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let vars = self.tower.vit_segments(&mut g, &self.store, tiled)?;
        Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Logits for `ids`; `images[k]` is the image introduced by the k-th
    /// `<image>` marker.
    pub fn logits(&self, g: &mut Graph, ids: &[usize], images: &[VisualFeatures]) -> Result<Var> {
        let mask = MediaMask::from_tokens(ids);
        if images.is_empty() {
            return self.decoder.forward(g, &self.store, ids, None, &mask);
        }
        let media = MediaTokens::from_features(g, images)?;
        self.decoder.forward(g, &self.store, ids, Some(&media), &mask)
    }

    /// Mean cross-entropy over the sample's loss-masked target positions.
    pub fn sample_loss(&self, g: &mut Graph, sample: &TrainSample, image: Option<ImageInput<'_>>) -> Result<Var> {
        let n = sample.tokens.len();
        if n < 2 {
            return Err(Error::Argument("a training sample needs at least two tokens".into()));
        }
        let features = match (image, &sample.image) {
            (Some(i), _) => vec![self.encode(g, i)?],
            (None, Some(img)) => vec![self.encode(g, ImageInput::Raw(img))?],
            (None, None) => Vec::new(),
        };
        let inputs = &sample.tokens[..n - 1];
        let logits = self.logits(g, inputs, &features)?;
        let weights: Vec<f64> = sample.loss_mask[1..].iter().map(|&m| f64::from(u8::from(m))).collect();
        g.weighted_cross_entropy(logits, &sample.tokens[1..], &weights)
    }

    /// Greedy continuation of `prompt` until `<eos>` or `max_new` tokens.
    pub fn greedy_generate(&self, prompt: &[usize], image: Option<ImageInput<'_>>, max_new: usize) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let features = match image {
            Some(i) => vec![self.encode(&mut g, i)?],
            None => Vec::new(),
        };
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.logits(&mut g, &ids, &features)?;
            let last = g.value(logits).row(ids.len() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if next == EOS_TOKEN {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let s = &self.store;
        ParamCounts {
            vit: s.count(Bucket::Vit),
            decoder: s.count(Bucket::Decoder),
            gated_blocks: s.count(Bucket::GatedBlocks),
            projector: s.count(Bucket::Projector),
            total: s.total_count(),
        }
    }

    pub fn gate_statistics(&self) -> Vec<GateStat> {
        self.decoder.gate_statistics(&self.store)
    }
}
