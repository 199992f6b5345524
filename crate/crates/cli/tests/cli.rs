use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn nerfcodec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfcodec"))
        .args(args)
        .current_dir(dir)
        .env("CODEC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = nerfcodec(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model(dir: &Path) {
    ok(&["train-base", "--synthetic", "1", "--views", "8", "--size", "8", "--iters", "2", "--out", "model.ckpt"], dir);
}

#[test]
fn synth_encode_decode_render_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    let start = Instant::now();
    ok(&["synth", "--random", "4", "--size", "32", "--out", "scene"], d);
    ok(&["encode", "--model", "model.ckpt", "--scene", "scene", "--mode", "wo-ft", "--iters", "0", "--out", "s.ncb"], d);
    ok(&["decode", "--model", "model.ckpt", "--input", "s.ncb", "--out", "dec"], d);
    ok(&["render", "--model", "model.ckpt", "--input", "s.ncb", "--poses", "scene/transforms.json", "--out", "img"], d);
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
    assert!(d.join("dec/planes.raw").exists());
    assert_eq!(std::fs::read_dir(d.join("img")).unwrap().count(), 50);
}

#[test]
fn entropy_coded_report_matches_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    ok(&["synth", "--random", "5", "--views", "10", "--size", "8", "--out", "scene"], d);
    let stdout = ok(
        &["encode", "--model", "model.ckpt", "--scene", "scene", "--mode", "peft++", "--iters", "3", "--lambda-rate", "0.01", "--out", "s.ncb", "--metrics", "m.csv"],
        d,
    );
    let report: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let len = std::fs::metadata(d.join("s.ncb")).unwrap().len();
    assert_eq!(report["sizes"]["total"].as_u64(), Some(len));
    assert_eq!(report["bytes"].as_u64(), Some(len));
    let csv = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nerfcodec(&["encode", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let last = String::from_utf8(out.stderr).unwrap().lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(v["error"], "usage");
}

#[test]
fn failures_end_with_a_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = nerfcodec(&["decode", "--model", "missing.ckpt", "--input", "x", "--out", "y"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let last = String::from_utf8(out.stderr).unwrap().lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("missing.ckpt"));
}

#[test]
fn corrupted_bitstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    ok(&["synth", "--random", "6", "--views", "10", "--size", "8", "--out", "scene"], d);
    ok(&["encode", "--model", "model.ckpt", "--scene", "scene", "--mode", "wo-ft", "--iters", "0", "--out", "s.ncb"], d);
    let mut bytes = std::fs::read(d.join("s.ncb")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    std::fs::write(d.join("s.ncb"), bytes).unwrap();
    let out = nerfcodec(&["decode", "--model", "model.ckpt", "--input", "s.ncb", "--out", "dec"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"bitstream\""));
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    ok(&["synth", "--random", "7", "--views", "10", "--size", "8", "--out", "scene"], d);
    std::fs::write(d.join("cfg.toml"), "mode = \"peft\"\niterations = 2\nbatch_rays = 16\ncheckpoints = [0]\n").unwrap();
    let out = ok(&["--config", "cfg.toml", "encode", "--model", "model.ckpt", "--scene", "scene", "--out", "a.ncb", "--metrics", "a.csv"], d);
    assert!(out.contains("\"mode\":\"peft\""));
    let rows: Vec<u64> = std::fs::read_to_string(d.join("a.csv")).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rows, vec![0, 2]);
    let out = ok(&["--config", "cfg.toml", "encode", "--model", "model.ckpt", "--scene", "scene", "--mode", "full-ft", "--iters", "1", "--out", "b.ncb"], d);
    assert!(out.contains("\"mode\":\"full-ft\""));
    std::fs::write(d.join("bad.toml"), "lambda_tv = -1.0\n").unwrap();
    let out = nerfcodec(&["--config", "bad.toml", "encode", "--model", "model.ckpt", "--scene", "scene", "--out", "c.ncb"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_is_reproducible_and_tabulates_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    ok(&["synth", "--random", "8", "--views", "10", "--size", "8", "--out", "scene"], d);
    let args = ["bench", "--model", "model.ckpt", "--scene", "scene", "--iters", "2", "--seed", "3"];
    let a = ok(&args, d);
    let b = ok(&args, d);
    assert_eq!(a, b);
    assert!(a.starts_with("mode,iteration,psnr"));
    for m in ["wo-ft", "full-ft", "peft", "peft++"] {
        assert!(a.lines().any(|l| l.starts_with(&format!("{m},2,"))), "{m}");
    }
    assert!(a.contains("| Component (MB) | wo-ft | full-ft | peft | peft++ |"));
}

#[test]
fn objaverse_size_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["sizes", "--profile", "objaverse"], dir.path());
    assert!(out.lines().any(|l| l.starts_with("| Feature | 33.030 | 1.033 | 0.000 |")), "{out}");
}
