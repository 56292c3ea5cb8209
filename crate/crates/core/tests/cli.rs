use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use looc::cost::{read_codebook, read_grid};
use looc::data::{gen_correlated_map, save_pgm};
use looc::enhancement::enhanced_quantize;
use looc::quantizers::looc_quantize;
use looc::{FeatureMap, QuantConfig};

fn looc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_looc"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(&o)
    );
    stdout(&o)
}

#[test]
fn fit_reaches_full_usage() {
    let dir = tempfile::tempdir().unwrap();
    let cb = path(dir.path(), "cb.looc");
    let out = ok(looc(&[
        "fit",
        "--synthetic",
        "mixture:n=1000,d=8,c=16",
        "--K",
        "16",
        "--dstar",
        "4",
        "--m",
        "2",
        "--seed",
        "1",
        "--reactivate",
        "--out",
        &cb,
    ]));
    assert!(out.contains("usage=1.000"), "{out}");
    let file = read_codebook(std::fs::File::open(&cb).unwrap()).unwrap();
    assert_eq!((file.codebook.k(), file.codebook.dim(), file.m), (16, 4, 2));
}

#[test]
fn config_errors_exit_2() {
    let o = looc(&[
        "fit",
        "--synthetic",
        "mixture:n=100,d=8,c=4",
        "--dstar",
        "4",
        "--out",
        "unused",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = looc(&[
        "fit",
        "--synthetic",
        "mixture:n=100,d=8,c=4",
        "--K",
        "4",
        "--dstar",
        "3",
        "--out",
        "unused",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not divisible"), "{}", stderr(&o));

    let o = looc(&["cost", "--config", "banana"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = looc(&[
        "fit",
        "--input",
        &path(dir.path(), "missing.pgm"),
        "--K",
        "4",
        "--dstar",
        "4",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(3));

    let bad = dir.path().join("ascii.pgm");
    std::fs::write(&bad, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    let o = looc(&[
        "fit",
        "--input",
        bad.to_str().unwrap(),
        "--K",
        "4",
        "--dstar",
        "4",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("P5"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let o = looc(&["train", "--lr", "1000", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

fn fit_correlated(dir: &Path) -> String {
    let cb = path(dir, "cb.looc");
    ok(looc(&[
        "fit",
        "--input",
        "correlated:h=16,w=16,d=8,s=2,seed=11",
        "--K",
        "8",
        "--dstar",
        "2",
        "--reactivate",
        "--out",
        &cb,
    ]));
    cb
}

#[test]
fn quantize_beta1_matches_plain_path_and_reports_costs() {
    let dir = tempfile::tempdir().unwrap();
    let cb = fit_correlated(dir.path());
    let (grid, stats) = (path(dir.path(), "g.loog"), path(dir.path(), "s.json"));
    ok(looc(&[
        "quantize",
        "--cb",
        &cb,
        "--input",
        "correlated:h=12,w=10,d=8,s=1",
        "--seed",
        "4",
        "--out",
        &grid,
        "--stats",
        &stats,
    ]));
    let file = read_codebook(std::fs::File::open(&cb).unwrap()).unwrap();
    let stored = read_grid(std::fs::File::open(&grid).unwrap()).unwrap();
    let z = gen_correlated_map(12, 10, 8, 1.0, 4).unwrap();
    assert_eq!(
        stored,
        looc_quantize(&z, &file.codebook, 4, file.metric).unwrap()
    );

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(json["codebookBits"].as_u64(), Some(32 * 8 * 2));
    assert_eq!(json["indexBits"].as_u64(), Some(12 * 10 * 4 * 3));
    assert_eq!(json["per_segment_usage"].as_array().unwrap().len(), 4);
    assert!(json["ssim"].as_f64().is_some());
}

#[test]
fn dequantize_reproduces_reported_mse() {
    let dir = tempfile::tempdir().unwrap();
    let cb = fit_correlated(dir.path());
    let grid = path(dir.path(), "g.loog");
    let input = "correlated:h=8,w=8,d=8,s=2,seed=21";
    let q = ok(looc(&[
        "quantize", "--cb", &cb, "--input", input, "--beta", "2", "--out", &grid,
    ]));
    let d = ok(looc(&[
        "dequantize",
        "--cb",
        &cb,
        "--grid",
        &grid,
        "--beta",
        "2",
        "--reference",
        input,
    ]));
    assert!(
        (field(&q, "mse") - field(&d, "mse")).abs() < 1e-8,
        "{q}\n{d}"
    );

    let file = read_codebook(std::fs::File::open(&cb).unwrap()).unwrap();
    let z = gen_correlated_map(8, 8, 8, 2.0, 21).unwrap();
    let cfg = QuantConfig {
        m: 4,
        beta: 2,
        ..Default::default()
    };
    let expected = enhanced_quantize(&z, &file.codebook, &cfg).unwrap();
    assert_eq!(
        read_grid(std::fs::File::open(&grid).unwrap()).unwrap(),
        expected.grid
    );
}

#[test]
fn pgm_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let image: Vec<f32> = (0..24 * 20)
        .map(|i| ((i % 24) as f32 / 23.0 + (i / 24) as f32 / 19.0) / 2.0)
        .collect();
    let img_path: PathBuf = dir.path().join("img.pgm");
    save_pgm(&FeatureMap::from_vec(20, 24, 1, image).unwrap(), &img_path).unwrap();
    let img = img_path.to_str().unwrap();
    let (cb, grid, out) = (
        path(dir.path(), "cb.looc"),
        path(dir.path(), "g.loog"),
        path(dir.path(), "r.pgm"),
    );
    ok(looc(&[
        "fit",
        "--input",
        img,
        "--patch",
        "4",
        "--K",
        "16",
        "--dstar",
        "4",
        "--reactivate",
        "--out",
        &cb,
    ]));
    let q = ok(looc(&[
        "quantize", "--cb", &cb, "--input", img, "--out", &grid,
    ]));
    assert!(field(&q, "ssim") > 0.5, "{q}");
    ok(looc(&[
        "dequantize",
        "--cb",
        &cb,
        "--grid",
        &grid,
        "--out",
        &out,
    ]));
    let recon = looc::data::load_pgm(&out).unwrap();
    assert_eq!(recon.shape(), (20, 24, 1));
}

#[test]
fn cost_prints_compact_codebook_ratio() {
    let out = ok(looc(&[
        "cost",
        "--config",
        "1024x128",
        "--config",
        "32x4:m=32",
        "--hw",
        "8x8",
    ]));
    assert!(out.contains("4194304"), "{out}");
    assert!(out.contains(" 4096 "), "{out}");
    assert!(out.contains("1024.0000"), "{out}");

    let json = ok(looc(&[
        "cost",
        "--config",
        "256x4:m=32",
        "--hw",
        "16x16",
        "--json",
    ]));
    let rows: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(rows[0]["codebookBits"].as_u64(), Some(32 * 256 * 4));
    assert_eq!(rows[0]["indexBits"].as_u64(), Some(16 * 16 * 32 * 8));
}

#[test]
fn train_reduces_loss_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.csv"), path(dir.path(), "b.csv"));
    let out = ok(looc(&["train", "--seed", "9", "--log", &a]));
    ok(looc(&["train", "--seed", "9", "--log", &b]));
    assert!(field(&out, "final_total") < field(&out, "initial_total"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(&a).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("step,recon,codebook,commit,total,usage")
    );
    assert_eq!(log.lines().count(), 201);

    let ema = ok(looc(&[
        "train",
        "--input",
        "correlated:h=8,w=8,d=4,s=1",
        "--beta",
        "2",
        "--ema",
        "--steps",
        "20",
    ]));
    assert!(field(&ema, "final_total").is_finite());
    let o = looc(&["train", "--beta", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_counts_match_cost_model() {
    let out = ok(looc(&[
        "bench", "--K", "8", "--dstar", "2", "--m", "3", "--hw", "16x16", "--reps", "1",
    ]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{out}");
    assert!(rows.iter().all(|r| r.trim_end().ends_with("yes")), "{out}");

    let out = ok(looc(&[
        "bench", "--K", "256", "--m", "4", "--hw", "4x4", "--reps", "1",
    ]));
    assert!(out.contains("skipped"), "{out}");
}
