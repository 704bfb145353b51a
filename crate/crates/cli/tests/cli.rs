use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dyadmotion_core::arrayfile::{read_matrix, write_matrix};
use dyadmotion_core::metrics::EvalReport;
use image::RgbImage;
use ndarray::Array2;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyadmotion"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(args: &[&str], needle: &str) {
    let out = run(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success(), "{args:?} should fail");
    assert!(stderr.contains(needle), "{args:?}: expected {needle:?} in\n{stderr}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn generate_data_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        ok(&["--seed", seed, "generate-data", "--out", s(out), "--takes", "3", "--duration", "8"]);
    }
    let (fa, fb, fc) = (files(&a), files(&b), files(&c));
    assert!(fa.iter().any(|(name, _)| name.ends_with("motion.bin")));
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn bad_configs_and_arguments_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[body]\nwidht = 3\n").unwrap();
    let out = dir.path().join("data");
    fails_with(&["--config", s(&bad), "generate-data", "--out", s(&out)], "widht");
    fails_with(&["--config", s(&dir.path().join("missing.toml")), "generate-data", "--out", s(&out)], "missing.toml");
    fails_with(&["train", "--model", "lip", "--data", s(&out), "--models", s(&out)], "corpus");
    ok(&["generate-data", "--out", s(&out), "--takes", "3", "--duration", "8"]);
    let models = dir.path().join("models");
    fails_with(&["train", "--model", "body", "--vq-only", "--data", s(&out), "--models", s(&models)], "--vq-only");
    fails_with(&["train", "--model", "face", "--data", s(&out), "--models", s(&models)], "lip regressor");
    fails_with(&["train", "--model", "body", "--variant", "sideways", "--data", s(&out), "--models", s(&models)], "sideways");
    fails_with(&["sample", "--models", s(&models), "--take", s(&out.join("take_0000")), "--out", s(&dir.path().join("x"))], "body model");
    // The shipped smoke configuration parses.
    ok(&["--config", s(&smoke_config()), "generate-data", "--out", s(&dir.path().join("d2")), "--takes", "3", "--duration", "8"]);
}

fn write_motion(dir: &Path, motion: Array2<f32>) {
    std::fs::create_dir_all(dir).unwrap();
    write_matrix(&dir.join("motion.bin"), "motion", &motion).unwrap();
}

fn coloured(img: &RgbImage, x_range: std::ops::Range<u32>, pred: impl Fn([u8; 3]) -> bool) -> usize {
    img.enumerate_pixels().filter(|(x, _, p)| x_range.contains(x) && pred(p.0)).count()
}

fn bluish(p: [u8; 3]) -> bool {
    p[2] > 120 && p[0] < 100
}

fn reddish(p: [u8; 3]) -> bool {
    p[0] > 120 && p[2] < 100
}

#[test]
fn visualize_draws_the_rest_pose_and_side_by_side_panels() {
    let dir = tempfile::tempdir().unwrap();
    let rest = dir.path().join("rest");
    write_motion(&rest, Array2::zeros((3, 104)));
    let frames = dir.path().join("frames");
    ok(&["visualize", "--input", s(&rest), "--out", s(&frames)]);
    let names: Vec<_> = files(&frames).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["frame_00000.png", "frame_00001.png", "frame_00002.png"]);
    let img = image::open(frames.join("frame_00000.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (240, 320));
    assert_eq!(img, image::open(frames.join("frame_00002.png")).unwrap().to_rgb8());
    // The rest skeleton stands upright and roughly centred.
    let ink: Vec<(u32, u32)> = img.enumerate_pixels().filter(|(_, _, p)| bluish(p.0)).map(|(x, y, _)| (x, y)).collect();
    assert!(ink.len() > 200, "{} pixels drawn", ink.len());
    let (min_y, max_y) = (ink.iter().map(|p| p.1).min().unwrap(), ink.iter().map(|p| p.1).max().unwrap());
    assert!(max_y - min_y > 200, "figure spans {min_y}..{max_y}");
    let mean_x = ink.iter().map(|p| p.0 as f64).sum::<f64>() / ink.len() as f64;
    assert!((mean_x - 120.0).abs() < 30.0, "mean x {mean_x}");

    let mut moved = Array2::zeros((3, 104));
    moved.column_mut(10).fill(0.8);
    let other = dir.path().join("other");
    write_motion(&other, moved);
    let pair = dir.path().join("pair");
    ok(&["visualize", "--input", s(&rest), "--compare", s(&other), "--out", s(&pair)]);
    let img = image::open(pair.join("frame_00001.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (480, 320));
    assert!(coloured(&img, 0..240, bluish) > 200);
    assert!(coloured(&img, 240..480, reddish) > 200);
    assert_eq!(coloured(&img, 240..480, bluish), 0);
    assert_eq!(coloured(&img, 0..240, reddish), 0);
}

#[test]
fn visualize_rejects_unwritable_outputs_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let rest = dir.path().join("rest");
    write_motion(&rest, Array2::zeros((2, 104)));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"not a directory").unwrap();
    fails_with(&["visualize", "--input", s(&rest), "--out", s(&blocker.join("frames"))], "Error");
    fails_with(&["visualize", "--input", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("f"))], "motion");
}

#[test]
fn smoke_chain_trains_samples_evaluates_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let c = s(&cfg);
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    ok(&["--config", c, "generate-data", "--out", s(&data), "--takes", "5", "--duration", "24"]);
    for model in ["lip", "face", "rvq", "guide", "body"] {
        ok(&["--config", c, "train", "--model", model, "--data", s(&data), "--models", s(&models), "--steps", "20"]);
        assert!(models.join(model).is_dir(), "{model} checkpoint missing");
    }
    let take = data.join("take_0000");
    let full = dir.path().join("full");
    ok(&["--config", c, "--seed", "3", "sample", "--models", s(&models), "--take", s(&take), "--duration", "20", "--out", s(&full)]);
    let motion: Array2<f32> = read_matrix(&full.join("motion.bin"), "motion").unwrap();
    let face: Array2<f32> = read_matrix(&full.join("face.bin"), "face").unwrap();
    let guides: Array2<f32> = read_matrix(&full.join("guides.bin"), "guides").unwrap();
    assert_eq!((motion.nrows(), face.nrows(), guides.nrows()), (600, 600, 20));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(full.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"], 600);

    // Same seed, same output; the guide-only mode writes guides alone.
    let again = dir.path().join("again");
    ok(&["--config", c, "--seed", "3", "sample", "--models", s(&models), "--take", s(&take), "--duration", "20", "--out", s(&again)]);
    assert_eq!(files(&full), files(&again));
    let guide_only = dir.path().join("guide_only");
    ok(&["--config", c, "sample", "--guide-only", "--models", s(&models), "--take", s(&take), "--out", s(&guide_only)]);
    assert!(guide_only.join("guides.bin").is_file() && !guide_only.join("motion.bin").exists());

    let report = dir.path().join("out/report.json");
    ok(&["--config", c, "eval", "--data", s(&data), "--models", s(&models), "--system", "gt,random,full", "--seeds", "1", "--out", s(&report)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report.seeds, vec![1]);
    assert_eq!(report.systems.keys().collect::<Vec<_>>(), vec!["full", "gt", "random"]);
    assert_eq!(report.systems["full"].metrics.keys().collect::<Vec<_>>(), report.systems["random"].metrics.keys().collect::<Vec<_>>());
    fails_with(&["--config", c, "eval", "--data", s(&data), "--models", s(&models), "--system", "no_audio", "--out", s(&dir.path().join("r2.json"))], "body");

    let frames = dir.path().join("frames");
    ok(&["visualize", "--input", s(&full), "--compare", s(&take), "--face-strip", "--out", s(&frames)]);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 600);
    let img = image::open(frames.join("frame_00000.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (480, 368));
}
