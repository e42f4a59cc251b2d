//! Central-difference verification of the analytic gradients of a whole
//! toy model.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::data::TrainSample;
use crate::decoder::DecoderConfig;
use crate::error::Result;
use crate::model::{ImageInput, Model, ModelConfig};
use crate::params::{ParamId, TrainGroup};
use crate::pipeline::TowerConfig;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::vision::VitConfig;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative error, so coordinates whose true
/// derivative is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub group: TrainGroup,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn by_group(&self) -> BTreeMap<TrainGroup, (usize, f64)> {
        let mut out: BTreeMap<TrainGroup, (usize, f64)> = BTreeMap::new();
        for t in &self.tensors {
            let e = out.entry(t.group).or_default();
            e.0 += t.checked;
            e.1 = e.1.max(t.max_rel_err);
        }
        out
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.tensors.extend(other.tensors);
    }
}

/// Compares `loss`'s analytic gradient against central differences at
/// `per_tensor` random coordinates of every parameter, plus the coordinate
/// with the largest analytic gradient. The model's weights are restored
/// afterwards.
pub fn check_model<F>(model: &mut Model, per_tensor: usize, rng: &mut SeedRng, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Model) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, model)?;
    let grads = g.backward(l)?;
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, m)?;
        Ok(g.value(l).data()[0])
    };
    let store = model.store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.iter_sorted().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let zero = Tensor::zeros(p.value.shape());
        let analytic = grads.get(id).unwrap_or(&zero);
        let n = p.value.len();
        let argmax = (0..n).fold(0, |b, i| if analytic.data()[i].abs() > analytic.data()[b].abs() { i } else { b });
        let mut coords: Vec<usize> = (0..per_tensor.min(n)).map(|_| rng.range(0, n)).collect();
        coords.push(argmax);
        coords.sort_unstable();
        coords.dedup();
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = p.value.data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = eval(model);
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = eval(model);
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let (up, down) = (up?, down?);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.tensors.push(TensorCheck {
            name: p.name.clone(),
            group: p.bucket.group(),
            checked: coords.len(),
            max_rel_err: worst,
            max_abs_grad: analytic.data()[argmax].abs(),
        });
    }
    Ok(report)
}

/// Tiny architecture: every component present, a 2x2 grid of 8px tiles.
pub fn toy_config(pool_slots: Option<usize>) -> ModelConfig {
    ModelConfig {
        vit: VitConfig { base_resolution: 8, patch_size: 4, d_model: 12, n_heads: 2, n_layers: 2, channels: 3, use_cls: true, ff_mult: 2 },
        tower: TowerConfig { max_grid: 2, d_visual: 10, projector_hidden: 14, tile_pos: true, pool_slots },
        decoder: DecoderConfig {
            d_model: 12,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 16,
            xattn_interval: 1,
            d_visual: 10,
            ff_mult: 2,
            ..DecoderConfig::default()
        },
    }
}

/// Gates are drawn away from zero so every cross-attention parameter
/// receives gradient.
pub fn randomize_gates(model: &mut Model, rng: &mut SeedRng) {
    let gates: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with("_gate"))
        .map(|(id, _)| id)
        .collect();
    for id in gates {
        for v in model.store.get_mut(id).value.data_mut() {
            *v = rng.normal(0.7);
        }
    }
}

/// Full-model check at `seed`, with and without the pooling bottleneck.
pub fn run_gradcheck(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let rng = SeedRng::new(seed);
    let mut report = GradCheckReport::default();
    for (k, pool) in [None, Some(3)].into_iter().enumerate() {
        let mut r = rng.split_index(k as u64);
        let mut model = Model::new(toy_config(pool), r.next_u64())?;
        randomize_gates(&mut model, &mut r);
        let image = Tensor::from_fn(&[3, 15, 17], |_| r.uniform());
        let sample = TrainSample::qa(image, "Q?", "ab", None);
        let tiled = model.tower.tile(sample.image.as_ref().expect("has image"))?;
        let part = check_model(&mut model, per_tensor, &mut r, |g, m| m.sample_loss(g, &sample, Some(ImageInput::Tiled(&tiled))))?;
        report.extend(part);
    }
    Ok(report)
}
