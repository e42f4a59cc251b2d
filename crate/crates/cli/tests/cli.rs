use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use imhd_core::train::{DatasetSource, Stage, StageConfig};
use imhd_core::ModelConfig;

fn imhd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imhd")).args(args).env_remove("IMHD_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn tile_reports_snap_grid_and_passes() {
    assert_eq!(stdout(&imhd(&["tile", "--h", "800", "--w", "600", "--tile", "448"])), "snap 896x448, grid 1x2, passes 3\n");
    assert_eq!(stdout(&imhd(&["tile", "--h", "5000", "--w", "10", "--tile", "448"])), "snap 1344x448, grid 1x3, passes 4\n");
    assert!(!imhd(&["tile", "--h", "0", "--w", "10", "--tile", "448"]).status.success());
}

#[test]
fn analyze_csv_rows() {
    let out = stdout(&imhd(&["analyze", "--format", "csv"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    let rows = imhd_core::cost::parse_csv(&out).unwrap();
    let tokens: Vec<usize> = rows.iter().map(|r| r.visual_tokens).collect();
    assert_eq!(tokens, [257, 1025, 9217]);
    assert!(rows.iter().all(|r| r.xattn_cost < r.concat_cost));

    let text = stdout(&imhd(&["analyze", "--resolutions", "448", "--no-cls"]));
    assert!(text.contains("1024"), "{text}");
}

#[test]
fn gradcheck_passes_and_respects_tolerance() {
    let out = stdout(&imhd(&["gradcheck", "--per-tensor", "2", "--seed", "3"]));
    assert!(out.lines().last().unwrap().starts_with("max rel err"));
    let strict = imhd(&["gradcheck", "--per-tensor", "2", "--seed", "3", "--tolerance", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn params_total_matches_library() {
    let out = stdout(&imhd(&["params"]));
    let total: usize = out.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let model = imhd_core::Model::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(total, model.count_parameters().total);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"[{"stage": "PT", "steps": 3}]"#).unwrap();
    let o = imhd(&["train", "--stage", "PT", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(!dir.path().join("x.ckpt").exists());

    let o = imhd(&["train", "--stage", "XYZ", "--out", "unused.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(imhd(&["tile", "--h", "nope"]).status.code(), Some(2));
}

#[test]
fn augment_writes_images_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aug");
    stdout(&imhd(&["augment", "--out", out.to_str().unwrap(), "--pairs", "5", "--min-size", "32", "--max-size", "48", "--seed", "4"]));
    let jsonl = fs::read_to_string(out.join("data.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let img = imhd_core::imageio::read_image(&out.join(v["image"].as_str().unwrap())).unwrap();
        assert_eq!(img.shape()[0], 3);
        assert!(!v["answer"].as_str().unwrap().is_empty());
    }
}

fn write_configs(dir: &Path) -> (String, String) {
    let tiny = ModelConfig::tiny();
    let model = dir.join("model.json");
    fs::write(&model, serde_json::to_string(&tiny).unwrap()).unwrap();
    let mut pt = StageConfig::desk_default(Stage::Pt, tiny.vit.base_resolution);
    pt.steps = 3;
    pt.warmup = 1;
    pt.dataset = DatasetSource::Synthetic { kind: imhd_core::data::DatasetKind::Caption, n: 4, min_size: 16, max_size: 32 };
    let stages = dir.join("stages.json");
    fs::write(&stages, serde_json::to_string(&vec![pt]).unwrap()).unwrap();
    (model.to_str().unwrap().into(), stages.to_str().unwrap().into())
}

fn train_once(dir: &Path, name: &str, seed: Option<&str>) -> (Vec<u8>, String) {
    let (model, stages) = write_configs(dir);
    let ckpt = dir.join(format!("{name}.ckpt"));
    let mut args = vec!["train", "--stage", "pt", "--config", &stages, "--model-config", &model, "--out", ckpt.to_str().unwrap()];
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_imhd"));
    cmd.env_remove("IMHD_SEED");
    match seed {
        Some(s) => {
            cmd.env("IMHD_SEED", s);
        }
        None => args.extend(["--seed", "9"]),
    }
    let o = cmd.args(&args).output().unwrap();
    let out = stdout(&o);
    assert!(out.contains("stage PT: 3 steps"), "{out}");
    let metrics = fs::read_to_string(dir.join(format!("{name}.ckpt.metrics.csv"))).unwrap();
    (fs::read(ckpt).unwrap(), metrics)
}

#[test]
fn train_is_deterministic_and_reads_seed_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let (a, ma) = train_once(dir.path(), "a", None);
    let (b, mb) = train_once(dir.path(), "b", None);
    let (c, mc) = train_once(dir.path(), "c", Some("9"));
    let (d, _) = train_once(dir.path(), "d", Some("10"));
    assert_eq!(ma.lines().next().unwrap(), "step,lr,loss,grad_norm");
    assert_eq!(ma.lines().count(), 4);
    assert!(a == b && ma == mb);
    assert!(a == c && ma == mc);
    assert_ne!(a, d);

    let ckpt = imhd_core::checkpoint::Checkpoint::load(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(ckpt.seed, 9);
    assert_eq!(ckpt.stage, imhd_core::checkpoint::StageTag::Pt);
}
