//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits non-zero if any check fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use imhd_core::augment::{augment_corpus, Corner};
use imhd_core::autodiff::Graph;
use imhd_core::checkpoint::{apply_checkpoint, load_model, Checkpoint, StageTag};
use imhd_core::cost::self_attention_cost;
use imhd_core::data::{base_images, SizeRange};
use imhd_core::decoder::{encode_text, MediaMask, IMAGE_TOKEN};
use imhd_core::gradcheck::{randomize_gates, run_gradcheck};
use imhd_core::model::ImageInput;
use imhd_core::resample::resize_image;
use imhd_core::tiling::{snap_resolution, tile_image, TiledImage};
use imhd_core::train::{
    evaluate_loss, exact_match, load_dataset, run_pipeline, run_stage_on, DatasetSource, Stage, StageConfig, StageOutput,
};
use imhd_core::vision::vit_token_count;
use imhd_core::{Model, ModelConfig, SeedRng, Tensor};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let checks: Vec<(&str, fn() -> Check)> = vec![
        ("token_arithmetic", token_arithmetic),
        ("sixteen_fold_self_attention", sixteen_fold_self_attention),
        ("gate_zero_identity", gate_zero_identity),
        ("gradient_fidelity", gradient_fidelity),
        ("freeze_table", freeze_table),
        ("tiling_laws", tiling_laws),
        ("cpt_handoff", cpt_handoff),
        ("overfit_smoke", overfit_smoke),
        ("augmentation_soundness", augmentation_soundness),
        ("determinism", determinism),
        ("tile_position_ablation", tile_position_ablation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn token_arithmetic() -> Check {
    let counts = [(224, 257), (448, 1025), (1344, 9217)];
    for (res, want) in counts {
        let got = vit_token_count(res, 14, true).map_err(|e| e.to_string())?;
        ensure!(got == want, "{res}px: {got} tokens, expected {want}");
    }
    ensure!(vit_token_count(448, 14, false).unwrap() == 1024, "448px without class token");
    Ok("224->257, 448->1025, 1344->9217".into())
}

fn sixteen_fold_self_attention() -> Check {
    let low = vit_token_count(224, 14, false).unwrap();
    let high = vit_token_count(448, 14, false).unwrap();
    let ratio = self_attention_cost(high) / self_attention_cost(low);
    ensure!(ratio == 16.0, "ratio {ratio}");
    Ok(format!("{high} vs {low} patch tokens: ratio {ratio}"))
}

fn gate_zero_identity() -> Check {
    let model = Model::new(ModelConfig::default(), 31).unwrap();
    let mut rng = SeedRng::new(32);
    let mut worst = 0.0f64;
    for (h, w) in [(32, 32), (70, 45), (150, 190)] {
        let img = Tensor::from_fn(&[3, h, w], |_| rng.uniform());
        let mut ids = vec![IMAGE_TOKEN];
        ids.extend(encode_text("what is shown here?"));
        let mut g = Graph::inference();
        let feats = model.encode(&mut g, ImageInput::Raw(&img)).unwrap();
        let with = model.logits(&mut g, &ids, &[feats]).unwrap();
        let without = model.decoder.forward(&mut g, &model.store, &ids, None, &MediaMask::none(ids.len())).unwrap();
        worst = worst.max(g.value(with).max_abs_diff(g.value(without)));
    }
    ensure!(worst == 0.0, "max abs diff {worst:e}");
    Ok("max abs diff 0 over three image sizes".into())
}

fn gradient_fidelity() -> Check {
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut groups = BTreeSet::new();
    for seed in [7, 11, 13] {
        let r = run_gradcheck(seed, 6).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_err());
        for (g, (n, _)) in r.by_group() {
            groups.insert(g);
            coords += n;
        }
    }
    ensure!(groups.len() == 3, "groups probed: {groups:?}");
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("{coords} coordinates, max relative error {worst:.2e}"))
}

fn quick_stages(base_res: usize, steps: u64, n: usize) -> Vec<StageConfig> {
    Stage::ALL
        .iter()
        .map(|&stage| {
            let mut c = StageConfig::desk_default(stage, base_res);
            c.steps = steps;
            c.warmup = 1;
            c.batch = 2;
            c.grad_accum = 1;
            if let DatasetSource::Synthetic { n: count, .. } = &mut c.dataset {
                *count = n;
            }
            c
        })
        .collect()
}

fn ckpt(dir: &Path, name: &str) -> Checkpoint {
    Checkpoint::load(&dir.join(format!("{name}.ckpt"))).unwrap()
}

fn freeze_table() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let base = ModelConfig::tiny();
    run_pipeline(&base, &quick_stages(16, 10, 4), 41, dir.path()).map_err(|e| e.to_string())?;
    let reference = Model::new(base.clone(), 41).unwrap();
    let group_of = |name: &str| reference.store.by_name(name).unwrap().bucket.group();
    let dead: BTreeSet<String> =
        reference.tower.vit.unused_final_block().into_iter().map(|id| reference.store.get(id).name.clone()).collect();
    let mut summary = Vec::new();
    let mut previous = ("init", ckpt(dir.path(), "init"));
    for stage in Stage::ALL {
        let name = stage.name().to_lowercase();
        let after = ckpt(dir.path(), &name);
        let res = match stage {
            Stage::Pt => 16,
            _ => 32,
        };
        // the input as the stage saw it, after any resampling at load time
        let mut input = Model::new(base.at_resolution(res), 41).unwrap();
        apply_checkpoint(&mut input.store, &previous.1).unwrap();
        let input = Checkpoint::from_model(&input, StageTag::Init);
        let trainable = stage.trainable();
        let (mut frozen, mut changed) = (0, 0);
        for (tensor, value) in &after.tensors {
            let same = input.tensors[tensor] == *value;
            if !trainable.contains(&group_of(tensor)) {
                ensure!(same, "{stage}: frozen tensor {tensor} changed");
                frozen += 1;
            } else if dead.contains(tensor) {
                ensure!(same, "{stage}: unreachable tensor {tensor} changed");
            } else {
                ensure!(!same, "{stage}: trainable tensor {tensor} unchanged after 10 steps (input {})", previous.0);
                changed += 1;
            }
        }
        summary.push(format!("{stage} {frozen} frozen/{changed} changed"));
        previous = (stage.name(), after);
    }
    Ok(format!("{}; {} unreachable final-encoder-block tensors exempt", summary.join(", "), dead.len()))
}

fn tiling_laws() -> Check {
    let tile = 16;
    let mut rng = SeedRng::new(61);
    let mut shapes = BTreeSet::new();
    for i in 0..1200 {
        let (h, w) = if i < 9 { (tile * (1 + i / 3), tile * (1 + i % 3)) } else { (rng.range(tile, 3 * tile + 1), rng.range(tile, 3 * tile + 1)) };
        let img = Tensor::from_fn(&[3, h, w], |_| rng.uniform());
        let tiled = tile_image(&img, tile, 3).map_err(|e| e.to_string())?;
        let l = tiled.layout;
        let (sh, sw) = l.snapped_dims();
        ensure!(tiled.tiles.len() == l.rows * l.cols && l.tile_count() == l.rows * l.cols, "{h}x{w}: tile count");
        ensure!(l.vit_passes() == l.rows * l.cols + 1 && tiled.segments().len() == l.vit_passes(), "{h}x{w}: passes");
        ensure!(snap_resolution(sh, sw, tile, 3) == (sh, sw), "{h}x{w}: snap not idempotent");
        ensure!(tiled.reconstruct() == resize_image(&img, sh, sw).unwrap(), "{h}x{w}: lossy reconstruction");
        shapes.insert((l.rows, l.cols));
    }
    ensure!(shapes.len() == 9, "grid shapes covered: {shapes:?}");
    Ok("1200 sizes, all 9 grid shapes".into())
}

fn cpt_handoff() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let base = ModelConfig::default();
    let pt = Model::new(base.clone(), 71).unwrap();
    let path = dir.path().join("pt.ckpt");
    Checkpoint::from_model(&pt, StageTag::Pt).save(&path).unwrap();
    let res = 2 * base.vit.base_resolution;
    let (cpt, report, _) = load_model(&path, &base.at_resolution(res)).map_err(|e| e.to_string())?;
    let names: Vec<&str> = report.reshaped.iter().map(|r| r.name.as_str()).collect();
    ensure!(names == ["vit.pos_embed"], "reshaped {names:?}");
    // loading must agree with extending the stored weights in place
    let (mut extended, _, _) = load_model(&path, &base).unwrap();
    extended.extend_resolution(res).unwrap();
    let loaded = cpt.store.by_name("vit.pos_embed").unwrap().value.clone();
    ensure!(extended.store.by_name("vit.pos_embed").unwrap().value == loaded, "load and extend_resolution disagree");
    let old = Checkpoint::load(&path).unwrap().tensors["vit.pos_embed"].clone();
    let (g, ng, d) = (old.shape()[0], loaded.shape()[0], old.shape()[2]);
    for (a, b) in [((0, 0), (0, 0)), ((0, g - 1), (0, ng - 1)), ((g - 1, 0), (ng - 1, 0)), ((g - 1, g - 1), (ng - 1, ng - 1))] {
        for c in 0..d {
            ensure!(old.get(&[a.0, a.1, c]) == loaded.get(&[b.0, b.1, c]), "corner {a:?} channel {c} moved");
        }
    }
    Ok(format!("one reshape, vit.pos_embed {:?} -> {:?}, corners exact", report.reshaped[0].from, report.reshaped[0].to))
}

/// Steps to loss < 1.0 measured once at this seed, doubled.
const PT_STEPS: u64 = 720;
/// Smallest of 1200/1800/2400 steps that reached 100% count exact-match at
/// this seed. Runs are deterministic, so no extra margin is added.
const IFT_STEPS: u64 = 2400;

fn overfit_smoke() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let seed = 81;
    let rng = SeedRng::new(seed);
    let base = ModelConfig::default();
    let mut model = Model::new(base.clone(), seed).unwrap();

    let mut pt = StageConfig::desk_default(Stage::Pt, base.vit.base_resolution);
    pt.steps = PT_STEPS;
    let captions = load_dataset(&pt.dataset, &rng.split("pt-data")).unwrap();
    ensure!(captions.len() == 16, "{} caption samples", captions.len());
    let initial = evaluate_loss(&model, pt.resolution_policy, &captions).unwrap();
    let uniform = 258f64.ln();
    ensure!((initial - uniform).abs() < 1.0, "initial loss {initial:.3}, uniform {uniform:.3}");
    let out = StageOutput::new(dir.path().join("pt.ckpt"));
    let report = run_stage_on(&mut model, &pt, &captions, &rng.split("pt"), &out).map_err(|e| e.to_string())?;
    let pt_loss = evaluate_loss(&model, pt.resolution_policy, &captions).unwrap();
    let first_below = report.history.iter().find(|r| r.loss < 1.0).map(|r| r.step);
    ensure!(pt_loss < 1.0, "PT training-set loss {pt_loss:.3} after {PT_STEPS} steps");

    let ift = StageConfig::desk_default(Stage::Ift, base.vit.base_resolution);
    ensure!(ift.steps == IFT_STEPS, "IFT budget {}", ift.steps);
    let (mut model, _, _) = load_model(&out.checkpoint, &base.at_resolution(2 * base.vit.base_resolution)).unwrap();
    let qa = load_dataset(&ift.dataset, &rng.split("ift-data")).unwrap();
    ensure!(qa.len() == 32, "{} augmentation samples", qa.len());
    run_stage_on(&mut model, &ift, &qa, &rng.split("ift"), &StageOutput::new(dir.path().join("ift.ckpt"))).map_err(|e| e.to_string())?;
    let count: Vec<_> = qa.iter().filter(|s| s.template == Some(imhd_core::augment::Template::Count)).cloned().collect();
    ensure!(!count.is_empty(), "no count questions drawn");
    let em = exact_match(&model, ift.resolution_policy, &count).unwrap();
    let em_all = exact_match(&model, ift.resolution_policy, &qa).unwrap();
    ensure!(em == 1.0, "count exact-match {em:.3} on {} questions", count.len());
    Ok(format!(
        "PT loss {initial:.3} -> {pt_loss:.3} (first batch below 1.0 at step {first_below:?}); IFT count exact-match {em} on {}, all questions {em_all:.3}",
        count.len()
    ))
}

fn augmentation_soundness() -> Check {
    let rng = SeedRng::new(91);
    let bases = base_images(50, SizeRange { min: 32, max: 160 }, &rng.split("bases")).unwrap();
    let corpus = augment_corpus(&bases, 1000, &rng.split("corpus")).map_err(|e| e.to_string())?;
    ensure!(corpus.len() == 1000, "{} pairs", corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        ensure!(s.qa.is_sound(&s.spec), "pair {i} does not re-derive: {:?}", s.qa);
        ensure!(s.qa.answer == s.qa.template.answer(&s.spec, s.qa.corner), "pair {i} answer");
        ensure!(s.spec.corner(Corner::LeftTop).color != s.spec.corner(Corner::RightBottom).color, "pair {i} colors");
        let base = &bases[i % bases.len()];
        let [c, h, w] = base.shape()[..] else { unreachable!() };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let corner = (y < h / 2 && x < w / 2) || (y >= h - h / 2 && x >= w - w / 2);
                    if !corner && base.get(&[ch, y, x]) != s.image.get(&[ch, y, x]) {
                        return Err(format!("pair {i} changed pixel ({y},{x}) outside the corner quadrants"));
                    }
                }
            }
        }
    }
    Ok("1000 pairs sound, edits confined to corner quadrants".into())
}

fn determinism() -> Check {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        run_pipeline(&ModelConfig::tiny(), &quick_stages(16, 6, 4), 101, dir.path()).map_err(|e| e.to_string())?;
    }
    let mut files: Vec<String> = fs::read_dir(runs[0].path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    ensure!(files.len() == 9, "files {files:?}");
    for f in &files {
        let a = fs::read(runs[0].path().join(f)).unwrap();
        let b = fs::read(runs[1].path().join(f)).unwrap();
        ensure!(a == b, "{f} differs between runs");
    }
    Ok(format!("{} checkpoints and metrics files byte-identical", files.len()))
}

fn with_permuted_tiles(t: &TiledImage, perm: &[usize]) -> TiledImage {
    let mut out = t.clone();
    for (slot, &src) in perm.iter().enumerate() {
        out.tiles[slot].pixels = t.tiles[src].pixels.clone();
    }
    out
}

fn tile_position_ablation() -> Check {
    let mut model = Model::new(ModelConfig::tiny(), 111).unwrap();
    randomize_gates(&mut model, &mut SeedRng::new(112));
    let mut rng = SeedRng::new(113);
    let img = Tensor::from_fn(&[3, 32, 32], |_| rng.uniform());
    let tiled = model.tower.tile(&img).unwrap();
    ensure!(tiled.tiles.len() == 4, "expected a 2x2 grid");
    let perm = [2, 0, 3, 1];
    let permuted = with_permuted_tiles(&tiled, &perm);
    let mut ids = vec![IMAGE_TOKEN];
    ids.extend(encode_text("where?"));

    let run = |m: &Model, t: &TiledImage| {
        let mut g = Graph::inference();
        let f = m.encode(&mut g, ImageInput::Tiled(t)).unwrap();
        let per = f.tokens_per_segment;
        let feats = g.value(f.tokens).clone();
        let logits = m.logits(&mut g, &ids, &[f]).unwrap();
        let w = feats.shape()[1];
        let blocks: Vec<Vec<f64>> = feats.data().chunks(per * w).map(<[f64]>::to_vec).collect();
        (blocks, g.value(logits).clone())
    };
    let table_ids = ["tile_pos.row", "tile_pos.col", "tile_pos.thumbnail"].map(|n| model.store.id(n).unwrap());
    let set_tables = |model: &mut Model, f: &mut dyn FnMut() -> f64| {
        for id in table_ids {
            let shape = model.store.value(id).shape().to_vec();
            model.store.replace_value(id, Tensor::from_fn(&shape, |_| f()));
        }
    };
    let sorted = |mut b: Vec<Vec<f64>>| {
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b
    };

    set_tables(&mut model, &mut || 0.0);
    let (ba, la) = run(&model, &tiled);
    let (bb, lb) = run(&model, &permuted);
    ensure!(ba[0] == bb[0], "thumbnail features changed");
    for s in 0..4 {
        ensure!(bb[1 + s] == ba[1 + perm[s]], "slot {s} features are not the permuted original");
    }
    let zero_diff = la.max_abs_diff(&lb);
    ensure!(zero_diff < 1e-12, "with zero tables, logits moved {zero_diff:e}");

    set_tables(&mut model, &mut || rng.normal(1.0));
    let (ba, la) = run(&model, &tiled);
    let (bb, lb) = run(&model, &permuted);
    ensure!(sorted(ba) != sorted(bb), "with random tables, the visual token set is unchanged");
    let random_diff = la.max_abs_diff(&lb);
    ensure!(random_diff > 100.0 * zero_diff.max(1e-16), "with random tables, logits moved only {random_diff:e}");
    Ok(format!(
        "zero tables: features permute exactly, logits within {zero_diff:.1e}; unit random tables: token set changes, logits differ by {random_diff:.2e}"
    ))
}
