//! Staged training: freeze masks, resolution policies, the optimization
//! loop, metrics and checkpoint handoff.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{load_model, save_model, HandoffReport, StageTag};
use crate::data::{make_synthetic_dataset, DatasetKind, SizeRange, TrainSample};
use crate::error::{Error, Result};
use crate::imageio::read_image;
use crate::model::{ImageInput, Model, ModelConfig};
use crate::optim::{clip_grad_norm, global_grad_norm, AdamWConfig, AdamWState, LrSchedule};
use crate::params::{ParamId, TrainGroup};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::tiling::{single_tile, tile_image, TileLayout, TiledImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Pt,
    Cpt,
    Dra,
    Ift,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pt, Stage::Cpt, Stage::Dra, Stage::Ift];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pt => "PT",
            Stage::Cpt => "CPT",
            Stage::Dra => "DRA",
            Stage::Ift => "IFT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected PT, CPT, DRA or IFT)")))
    }

    /// The freeze table: which groups each stage updates.
    pub fn trainable(self) -> BTreeSet<TrainGroup> {
        match self {
            Stage::Pt => BTreeSet::from([TrainGroup::Bridge]),
            Stage::Cpt | Stage::Dra => BTreeSet::from([TrainGroup::Vit, TrainGroup::Bridge]),
            Stage::Ift => BTreeSet::from([TrainGroup::Bridge, TrainGroup::Llm]),
        }
    }

    pub fn tag(self) -> StageTag {
        match self {
            Stage::Pt => StageTag::Pt,
            Stage::Cpt => StageTag::Cpt,
            Stage::Dra => StageTag::Dra,
            Stage::Ift => StageTag::Ift,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolutionPolicy {
    /// Every image is resized to one `resolution` square.
    Fixed { resolution: usize },
    /// Images are snapped onto a grid of `min`-sized tiles, up to `max`
    /// pixels per axis, plus a thumbnail.
    Dynamic { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { kind: DatasetKind, n: usize, min_size: usize, max_size: usize },
    /// One JSON object per line: `image` (path relative to the file), and
    /// either `caption` or `question` + `answer`.
    Jsonl { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: Vec<String>,
    pub resolution_policy: ResolutionPolicy,
    pub steps: u64,
    pub warmup: u64,
    /// Samples per micro-batch.
    pub batch: usize,
    /// Micro-batches averaged into each optimizer step.
    pub grad_accum: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Longest token sequence fed to the decoder; longer samples are cut.
    pub seq_len: usize,
    pub dataset: DatasetSource,
}

impl StageConfig {
    /// Small-machine settings for a model whose encoder starts at
    /// `base_resolution`. Warmup stays at 5% of the steps, PT keeps a flat
    /// learning rate, later stages decay to a tenth of the peak, and the
    /// optimizer constants follow the stage.
    pub fn desk_default(stage: Stage, base_resolution: usize) -> Self {
        let b = base_resolution;
        let adam = if stage == Stage::Pt { AdamWConfig::pretrain() } else { AdamWConfig::finetune() };
        let (policy, steps, warmup, batch, grad_accum, peak_lr, min_lr, kind, n, sizes) = match stage {
            Stage::Pt => (ResolutionPolicy::Fixed { resolution: b }, 720, 36, 2, 2, 3e-3, 3e-3, DatasetKind::Caption, 16, (b, 3 * b)),
            Stage::Cpt => (ResolutionPolicy::Fixed { resolution: 2 * b }, 80, 4, 2, 1, 1e-4, 1e-5, DatasetKind::Caption, 32, (2 * b, 6 * b)),
            Stage::Dra => (ResolutionPolicy::Dynamic { min: 2 * b, max: 6 * b }, 80, 4, 2, 1, 1e-4, 1e-5, DatasetKind::Vqa, 32, (2 * b, 6 * b)),
            Stage::Ift => (ResolutionPolicy::Dynamic { min: 2 * b, max: 6 * b }, 2400, 120, 1, 2, 1e-3, 1e-4, DatasetKind::TextOverlay, 32, (2 * b, 4 * b)),
        };
        let (min_size, max_size) = sizes;
        Self {
            stage,
            trainable: stage.trainable().into_iter().map(|g| g.name().to_string()).collect(),
            resolution_policy: policy,
            steps,
            warmup,
            batch,
            grad_accum,
            peak_lr,
            min_lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            clip_norm: 1.0,
            seq_len: 128,
            dataset: DatasetSource::Synthetic { kind, n, min_size, max_size },
        }
    }

    pub fn trainable_groups(&self) -> Result<BTreeSet<TrainGroup>> {
        self.trainable.iter().map(|n| TrainGroup::parse(n)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.trainable_groups()?;
        if groups != self.stage.trainable() {
            let want: Vec<_> = self.stage.trainable().into_iter().map(TrainGroup::name).collect();
            return Err(Error::Config(format!("stage {} trains exactly {want:?}, config lists {:?}", self.stage, self.trainable)));
        }
        let positive = [("batch", self.batch), ("grad_accum", self.grad_accum), ("seq_len", self.seq_len)];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds steps {}", self.warmup, self.steps)));
        }
        let finite = [self.peak_lr, self.min_lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::Config("learning rates and optimizer constants must be finite, non-negative, min_lr <= peak_lr".into()));
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0 && self.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("need beta < 1, eps > 0 and clip_norm > 0".into()));
        }
        match self.resolution_policy {
            ResolutionPolicy::Fixed { resolution: 0 } => Err(Error::Config("fixed resolution must be positive".into())),
            ResolutionPolicy::Dynamic { min, max } if min == 0 || max < min || max % min != 0 => {
                Err(Error::Config(format!("dynamic range {min}..{max} must be positive multiples of the tile size")))
            }
            _ => Ok(()),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak_lr: self.peak_lr, min_lr: self.min_lr, warmup_steps: self.warmup, total_steps: self.steps }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Stage configs as stored on disk: one object per stage.
pub fn load_stage_configs(path: &Path) -> Result<Vec<StageConfig>> {
    let text = fs::read_to_string(path)?;
    let configs: Vec<StageConfig> = serde_json::from_str(&text)?;
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

/// Enables gradients exactly on the stage's trainable groups.
pub fn apply_freeze_mask(model: &mut Model, config: &StageConfig) -> Result<()> {
    let groups = config.trainable_groups()?;
    model.store.set_requires_grad(|p| groups.contains(&p.bucket.group()));
    Ok(())
}

/// Parameters the optimizer touches: trainable and reachable from the loss.
/// The encoder's final block never feeds the output, so it is skipped.
pub fn optimized_ids(model: &Model) -> Vec<ParamId> {
    let dead: BTreeSet<ParamId> = model.tower.vit.unused_final_block().into_iter().collect();
    model.store.trainable_ids().into_iter().filter(|id| !dead.contains(id)).collect()
}

pub fn load_dataset(source: &DatasetSource, rng: &SeedRng) -> Result<Vec<TrainSample>> {
    match source {
        DatasetSource::Synthetic { kind, n, min_size, max_size } => {
            make_synthetic_dataset(*kind, *n, SizeRange { min: *min_size, max: *max_size }, rng)
        }
        DatasetSource::Jsonl { path } => load_jsonl(path),
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    image: Option<PathBuf>,
    caption: Option<String>,
    question: Option<String>,
    answer: Option<String>,
}

fn load_jsonl(path: &Path) -> Result<Vec<TrainSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let image = match &rec.image {
            Some(p) => read_image(&base.join(p))?,
            None => return Err(Error::Format(format!("{}:{}: record has no image", path.display(), i + 1))),
        };
        let sample = match (rec.caption, rec.question, rec.answer) {
            (Some(c), None, None) => TrainSample::caption(image, &c),
            (None, Some(q), Some(a)) => TrainSample::qa(image, &q, &a, None),
            _ => return Err(Error::Format(format!("{}:{}: need caption, or question and answer", path.display(), i + 1))),
        };
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no records", path.display())));
    }
    Ok(out)
}

/// Cuts a sample to at most `seq_len` decoder inputs.
fn truncate(sample: &TrainSample, seq_len: usize) -> TrainSample {
    let mut s = sample.clone();
    s.tokens.truncate(seq_len + 1);
    s.loss_mask.truncate(seq_len + 1);
    s
}

/// How images are turned into encoder inputs under a policy.
pub fn prepare_image(model: &Model, policy: ResolutionPolicy, img: &Tensor) -> Result<TiledImage> {
    let res = model.encoder_resolution();
    let max_grid = model.config.tower.max_grid;
    match policy {
        ResolutionPolicy::Fixed { resolution } => {
            if resolution != res {
                return Err(Error::Config(format!(
                    "stage runs at {resolution}px but the encoder takes {res}px tiles; call extend_resolution first"
                )));
            }
            single_tile(img, res, max_grid)
        }
        ResolutionPolicy::Dynamic { min, max } => {
            if min != res {
                return Err(Error::Config(format!("dynamic tiles of {min}px need an encoder at {min}px, have {res}px")));
            }
            let grid = max / min;
            if grid > max_grid {
                return Err(Error::Config(format!("{grid}x{grid} grid exceeds the {max_grid}x{max_grid} position table")));
            }
            tile_image(img, min, grid)
        }
    }
}

/// Encoder outputs precomputed under frozen encoder weights.
struct Cached {
    layout: TileLayout,
    segments: Vec<Tensor>,
}

enum Prepared {
    Text,
    Tiled(TiledImage),
    Cached(Cached),
}

fn prepare_all(model: &Model, policy: ResolutionPolicy, samples: &[TrainSample], cache: bool) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            if s.image_markers() > 1 {
                return Err(Error::Argument("samples carry at most one image".into()));
            }
            let Some(img) = &s.image else {
                if s.image_markers() != 0 {
                    return Err(Error::Argument("<image> marker without an image".into()));
                }
                return Ok(Prepared::Text);
            };
            if s.image_markers() != 1 {
                return Err(Error::Argument("image without an <image> marker".into()));
            }
            let tiled = prepare_image(model, policy, img)?;
            if cache {
                let segments = model.encode_segments(&tiled)?;
                Ok(Prepared::Cached(Cached { layout: tiled.layout, segments }))
            } else {
                Ok(Prepared::Tiled(tiled))
            }
        })
        .collect()
}

fn input_of(p: &Prepared) -> Option<ImageInput<'_>> {
    match p {
        Prepared::Text => None,
        Prepared::Tiled(t) => Some(ImageInput::Tiled(t)),
        Prepared::Cached(c) => Some(ImageInput::Encoded { layout: c.layout, segments: &c.segments }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    /// Global gradient norm before clipping.
    pub raw_grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub history: Vec<StepRecord>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl StageReport {
    pub fn grad_norm_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.grad_norm).collect()
    }
}

/// Where a stage writes its outputs.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: PathBuf,
    /// Defaults to `<checkpoint>.metrics.csv` beside the checkpoint.
    pub metrics: Option<PathBuf>,
}

impl StageOutput {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self { checkpoint: checkpoint.into(), metrics: None }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| {
            let mut p = self.checkpoint.clone().into_os_string();
            p.push(".metrics.csv");
            PathBuf::from(p)
        })
    }
}

/// Runs one stage on samples already in memory.
pub fn run_stage_on(model: &mut Model, config: &StageConfig, samples: &[TrainSample], rng: &SeedRng, out: &StageOutput) -> Result<StageReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("stage needs at least one sample".into()));
    }
    if config.seq_len > model.config.decoder.max_seq_len {
        return Err(Error::Config(format!("seq_len {} exceeds decoder max {}", config.seq_len, model.config.decoder.max_seq_len)));
    }
    apply_freeze_mask(model, config)?;
    let groups = config.trainable_groups()?;
    let samples: Vec<TrainSample> = samples.iter().map(|s| truncate(s, config.seq_len)).collect();
    let prepared = prepare_all(model, config.resolution_policy, &samples, !groups.contains(&TrainGroup::Vit))?;

    let ids = optimized_ids(model);
    let schedule = config.schedule();
    let mut opt = AdamWState::new(config.adamw());
    let metrics_path = out.metrics_path();
    let mut metrics = open_metrics(&metrics_path)?;
    let mut order = Order::new(samples.len(), rng.split("order"));
    let per_step = config.batch * config.grad_accum;
    let mut history = Vec::with_capacity(config.steps as usize);

    for step in 1..=config.steps {
        let lr = schedule.lr_at(step);
        model.store.zero_grad();
        let mut loss_sum = 0.0;
        for _ in 0..per_step {
            let i = order.next();
            let mut g = Graph::new();
            let loss = model.sample_loss(&mut g, &samples[i], input_of(&prepared[i]))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(nan_abort(step, lr, value, f64::NAN));
            }
            loss_sum += value;
            let grads = g.backward(loss).map_err(|e| match e {
                Error::NonFinite(msg) => nan_abort_msg(step, lr, &msg),
                other => other,
            })?;
            grads.accumulate_into(&mut model.store, 1.0 / per_step as f64);
        }
        let loss = loss_sum / per_step as f64;
        let raw = clip_grad_norm(&mut model.store, &ids, config.clip_norm);
        if !raw.is_finite() {
            return Err(nan_abort(step, lr, loss, raw));
        }
        let grad_norm = global_grad_norm(&model.store, &ids);
        opt.step(&mut model.store, &ids, lr)?;
        writeln!(metrics, "{step},{lr:e},{loss:e},{grad_norm:e}")?;
        history.push(StepRecord { step, lr, loss, grad_norm, raw_grad_norm: raw });
    }
    model.store.zero_grad();
    metrics.flush()?;
    save_model(model, config.stage.tag(), &out.checkpoint)?;
    Ok(StageReport {
        stage: config.stage,
        steps: config.steps,
        final_loss: history.last().map(|r| r.loss),
        history,
        checkpoint_path: out.checkpoint.clone(),
        metrics_path,
    })
}

/// Builds the stage's dataset from its source, then trains.
pub fn run_stage(model: &mut Model, config: &StageConfig, rng: &SeedRng, out: &StageOutput) -> Result<StageReport> {
    let samples = load_dataset(&config.dataset, &rng.split("data"))?;
    run_stage_on(model, config, &samples, &rng.split("train"), out)
}

fn nan_abort(step: u64, lr: f64, loss: f64, grad_norm: f64) -> Error {
    Error::NonFinite(format!("training diverged at step {step}: loss {loss}, lr {lr:e}, grad norm {grad_norm}"))
}

fn nan_abort_msg(step: u64, lr: f64, detail: &str) -> Error {
    Error::NonFinite(format!("training diverged at step {step} (lr {lr:e}): {detail}"))
}

fn open_metrics(path: &Path) -> Result<fs::File> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "step,lr,loss,grad_norm")?;
    }
    Ok(f)
}

/// Sample order: a fresh shuffle each epoch, derived from the stage seed.
struct Order {
    n: usize,
    rng: SeedRng,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Order {
    fn new(n: usize, rng: SeedRng) -> Self {
        let mut o = Self { n, rng, epoch: 0, perm: Vec::new(), pos: 0 };
        o.reshuffle();
        o
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.n).collect();
        self.rng.split_index(self.epoch).shuffle(&mut self.perm);
        self.epoch += 1;
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.reshuffle();
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

/// Mean loss over `samples` under the current weights, with no updates.
pub fn evaluate_loss(model: &Model, policy: ResolutionPolicy, samples: &[TrainSample]) -> Result<f64> {
    let prepared = prepare_all(model, policy, samples, true)?;
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(&prepared) {
        let mut g = Graph::inference();
        let loss = model.sample_loss(&mut g, s, input_of(p))?;
        total += g.value(loss).data()[0];
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of QA samples whose greedy answer matches exactly.
pub fn exact_match(model: &Model, policy: ResolutionPolicy, samples: &[TrainSample]) -> Result<f64> {
    let qa: Vec<&TrainSample> = samples.iter().filter(|s| s.answer.is_some()).collect();
    if qa.is_empty() {
        return Err(Error::Argument("no question-answer samples to score".into()));
    }
    let mut hits = 0;
    for s in &qa {
        let answer = s.answer.as_deref().expect("filtered");
        let tiled = s.image.as_ref().map(|img| prepare_image(model, policy, img)).transpose()?;
        let got = model.greedy_generate(&s.tokens[..s.prompt_len], tiled.as_ref().map(ImageInput::Tiled), answer.len() + 2)?;
        if crate::decoder::decode_text(&got) == answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / qa.len() as f64)
}

/// Result of a full multi-stage run.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub handoffs: Vec<HandoffReport>,
}

/// Runs the stages in order from a fresh model, writing `init.ckpt` and
/// one `<stage>.ckpt` per stage into `dir`. Each stage after the first
/// rebuilds the model at its own encoder resolution and loads the previous
/// stage's checkpoint from disk.
pub fn run_pipeline(base: &ModelConfig, stages: &[StageConfig], seed: u64, dir: &Path) -> Result<PipelineReport> {
    let rng = SeedRng::new(seed);
    let mut model = Model::new(base.clone(), seed)?;
    save_model(&model, StageTag::Init, &dir.join("init.ckpt"))?;
    let mut reports = Vec::new();
    let mut handoffs = Vec::new();
    for (k, cfg) in stages.iter().enumerate() {
        let res = match cfg.resolution_policy {
            ResolutionPolicy::Fixed { resolution } => resolution,
            ResolutionPolicy::Dynamic { min, .. } => min,
        };
        if let Some(prev) = reports.last().map(|r: &StageReport| r.checkpoint_path.clone()) {
            let (m, report, _) = load_model(&prev, &base.at_resolution(res))?;
            model = m;
            handoffs.push(report);
        } else if res != model.encoder_resolution() {
            model.extend_resolution(res)?;
        }
        let out = StageOutput::new(dir.join(format!("{}.ckpt", cfg.stage.name().to_lowercase())));
        reports.push(run_stage(&mut model, cfg, &rng.split_index(k as u64), &out)?);
    }
    Ok(PipelineReport { stages: reports, handoffs })
}
