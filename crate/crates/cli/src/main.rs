use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use imhd_core::augment::augment_corpus;
use imhd_core::checkpoint::load_model;
use imhd_core::cost::{report, to_csv, to_table, AnalysisConfig};
use imhd_core::data::{base_images, SizeRange};
use imhd_core::gradcheck::run_gradcheck;
use imhd_core::imageio::{read_image, write_ppm};
use imhd_core::tiling::TileLayout;
use imhd_core::train::{load_stage_configs, run_stage, ResolutionPolicy, Stage, StageConfig, StageOutput};
use imhd_core::{Model, ModelConfig, SeedRng};

/// Train, inspect and analyze a tiled high-resolution vision-language model.
#[derive(Parser)]
#[command(name = "imhd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Seed for every random choice; falls back to IMHD_SEED, then 0.
    #[arg(long, env = "IMHD_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Write text-overlay images and a JSON lines file of QA pairs.
    Augment(AugmentArgs),
    /// Tabulate sequence lengths and attention cost per resolution.
    Analyze(AnalyzeArgs),
    /// Show how an image of the given size is snapped and tiled.
    Tile(TileArgs),
    /// Check analytic gradients of the toy model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts per component.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: String,
    /// JSON array of stage configs; the entry for --stage is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON model config; defaults to the built-in toy model.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AugmentArgs {
    /// Output directory for images and `data.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    /// Background images (PPM or raw); synthetic scenes when omitted.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    min_size: usize,
    #[arg(long, default_value_t = 128)]
    max_size: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_delimiter = ',', default_value = "224,448,1344")]
    resolutions: Vec<usize>,
    #[arg(long, default_value_t = 14)]
    patch: usize,
    #[arg(long, default_value_t = 128)]
    text_len: usize,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    interval: usize,
    #[arg(long, default_value_t = 5120)]
    d_model: usize,
    #[arg(long, default_value_t = 448)]
    tile: usize,
    #[arg(long, default_value_t = 3)]
    max_grid: usize,
    /// Leave the class token out of the encoder token count.
    #[arg(long)]
    no_cls: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    tile: usize,
    #[arg(long, default_value_t = 3)]
    max_grid: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 4)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Augment(a) => augment(a),
        Command::Analyze(a) => analyze(a),
        Command::Tile(a) => tile(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    }
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let stage = Stage::parse(&a.stage)?;
    let base = model_config(a.model_config.as_deref())?;
    let cfg = match &a.config {
        Some(p) => load_stage_configs(p)?
            .into_iter()
            .find(|c| c.stage == stage)
            .with_context(|| format!("{} has no {stage} entry", p.display()))?,
        None => StageConfig::desk_default(stage, base.vit.base_resolution),
    };
    let res = match cfg.resolution_policy {
        ResolutionPolicy::Fixed { resolution } => resolution,
        ResolutionPolicy::Dynamic { min, .. } => min,
    };
    let mut model = match &a.init {
        Some(p) => {
            let (m, report, tag) = load_model(p, &base.at_resolution(res))?;
            for r in &report.reshaped {
                println!("resampled {} {:?} -> {:?}", r.name, r.from, r.to);
            }
            println!("loaded {} ({tag:?})", p.display());
            m
        }
        None => {
            let mut m = Model::new(base, a.seed.seed)?;
            if m.encoder_resolution() != res {
                m.extend_resolution(res)?;
            }
            m
        }
    };
    let out = StageOutput { checkpoint: a.out, metrics: a.metrics };
    let rng = SeedRng::new(a.seed.seed).split(stage.name());
    let r = run_stage(&mut model, &cfg, &rng, &out)?;
    match r.final_loss {
        Some(l) => println!("stage {stage}: {} steps, final loss {l:.4}", r.steps),
        None => println!("stage {stage}: 0 steps"),
    }
    println!("checkpoint {}", r.checkpoint_path.display());
    println!("metrics {}", r.metrics_path.display());
    Ok(ExitCode::SUCCESS)
}

fn augment(a: AugmentArgs) -> Result<ExitCode> {
    if a.pairs == 0 {
        bail!("--pairs must be at least 1");
    }
    let rng = SeedRng::new(a.seed.seed);
    let bases = if a.images.is_empty() {
        base_images(a.pairs, SizeRange { min: a.min_size, max: a.max_size }, &rng.split("bases"))?
    } else {
        a.images.iter().map(|p| read_image(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<_>>()?
    };
    let corpus = augment_corpus(&bases, a.pairs, &rng.split("augment"))?;
    fs::create_dir_all(&a.out)?;
    let mut jsonl = fs::File::create(a.out.join("data.jsonl"))?;
    for (i, s) in corpus.iter().enumerate() {
        let name = format!("sample_{i:05}.ppm");
        write_ppm(&a.out.join(&name), &s.image)?;
        let rec = json!({ "image": name, "question": s.qa.question, "answer": s.qa.answer, "spec": s.spec });
        writeln!(jsonl, "{rec}")?;
    }
    println!("wrote {} samples to {}", corpus.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let cfg = AnalysisConfig {
        patch: a.patch,
        text_len: a.text_len,
        n_layers: a.layers,
        xattn_interval: a.interval,
        d_model: a.d_model,
        use_cls: !a.no_cls,
        tile: a.tile,
        max_grid: a.max_grid,
    };
    let rows = report(&a.resolutions, &cfg)?;
    match a.format {
        Format::Text => print!("{}", to_table(&rows)),
        Format::Csv => print!("{}", to_csv(&rows)),
    }
    Ok(ExitCode::SUCCESS)
}

fn tile(a: TileArgs) -> Result<ExitCode> {
    if a.h == 0 || a.w == 0 || a.tile == 0 || a.max_grid == 0 {
        bail!("sizes must be positive");
    }
    let layout = TileLayout::for_resolution(a.h, a.w, a.tile, a.max_grid);
    let (sh, sw) = layout.snapped_dims();
    println!("snap {sh}x{sw}, grid {}x{}, passes {}", layout.cols, layout.rows, layout.vit_passes());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let r = run_gradcheck(a.seed.seed, a.per_tensor)?;
    for (group, (n, err)) in r.by_group() {
        println!("{:<24} {n:>5} coords  max rel err {err:.3e}", group.name());
    }
    let max = r.max_rel_err();
    println!("max rel err {max:.3e}");
    if max < a.tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {max:.3e} >= {:.0e}", a.tolerance);
        Ok(ExitCode::FAILURE)
    }
}

fn params(a: ParamsArgs) -> Result<ExitCode> {
    let model = Model::new(model_config(a.model_config.as_deref())?, a.seed.seed)?;
    let c = model.count_parameters();
    for (name, n) in c.as_map() {
        println!("{name:<14} {n:>10}");
    }
    println!("{:<14} {:>10}", "total", c.total);
    Ok(ExitCode::SUCCESS)
}
