mod common;

use std::path::Path;
use std::process::{Command, Output};

use sre_core::checkpoint::Checkpoint;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sre-bench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("quick.conf");
    std::fs::write(&p, "iterations = 2\nbatch_size = 2\naccumulation_steps = 1\nval_every = 1\nprecision = f64\n").unwrap();
    p
}

#[test]
fn bad_flags_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = bench(&["--mode", "bogus", "simulate", "--image", "x.ppm", "--out", "y.ppm"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "lambda = -3\n").unwrap();
    let o = bench(&["--config", s(&conf), "simulate", "--image", "x.ppm", "--out", "y.ppm"]);
    assert_eq!(code(&o), 2);

    let root = dir.path().join("data");
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(root.join("keep"), "x").unwrap();
    let o = bench(&["generate", "--out", s(&root), "--per-cell", "1"]);
    assert_eq!(code(&o), 2);
    assert!(root.join("keep").exists());
}

#[test]
fn too_small_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(bench(&["generate", "--out", s(&data), "--per-cell", "1"]).status.success());
    let conf = quick_config(dir.path());
    let o = bench(&[
        "--cache", s(&common::cache_dir()), "--config", s(&conf),
        "lodo", "--data", s(&data), "--modes", "zs", "--seeds", "0", "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_input_exits_with_one() {
    let o = bench(&["report", "--input", "/nonexistent/report.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_writes_image_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    sre_core::image::RasterImage::filled(8, 8, [0.8, 0.2, 0.1]).write_ppm(&img).unwrap();
    let out = dir.path().join("out.ppm");
    let o = bench(&["--seed", "3", "simulate", "--image", s(&img), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sre_core::image::RasterImage::read_ppm(&out).unwrap().height(), 8);
    let side = std::fs::read_to_string(out.with_extension("txt")).unwrap();
    assert!(side.contains("sigma"), "{side}");
}

#[test]
fn generate_train_eval_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cache = common::cache_dir();
    common::frozen_pair();
    let data = dir.path().join("data");
    let o = bench(&["generate", "--out", s(&data), "--per-cell", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 60 images"));

    let conf = quick_config(dir.path());
    let ck = dir.path().join("m.srec");
    let o = bench(&[
        "--cache", s(&cache), "--config", s(&conf), "--mode", "sre",
        "train", "--data", s(&data), "--held-out", "sketch", "--out", s(&ck),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck.with_extension("jsonl").exists());

    let o = bench(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--domains", "sketch,photo"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 2);
    assert!(out.starts_with("sketch"));

    let img = data.join("sketch/ring/0000.ppm");
    let heat = dir.path().join("h.pgm");
    let o = bench(&["heatmap", "--checkpoint", s(&ck), "--image", s(&img), "--out", s(&heat)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(heat.exists() && dir.path().join("h.overlay.ppm").exists() && dir.path().join("h.json").exists());

    let mut bad = Checkpoint::load(&ck).unwrap();
    bad.refocuser.sigma.data_mut()[0] = f64::NAN;
    let bad_path = dir.path().join("nan.srec");
    bad.save(&bad_path).unwrap();
    let o = bench(&["heatmap", "--checkpoint", s(&bad_path), "--image", s(&img), "--out", s(&heat)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn lodo_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cache = common::cache_dir();
    common::frozen_pair();
    let data = dir.path().join("data");
    assert!(bench(&["generate", "--out", s(&data), "--per-cell", "3"]).status.success());
    let conf = quick_config(dir.path());
    let out = dir.path().join("lodo");
    let o = bench(&[
        "--cache", s(&cache), "--config", s(&conf),
        "lodo", "--data", s(&data), "--modes", "zs,ar", "--seeds", "0", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);
    assert!(table.lines().any(|l| l.starts_with("ZS")) && table.lines().any(|l| l.starts_with("AR")));

    let again = dir.path().join("again");
    let o = bench(&["report", "--input", s(&out.join("report.json")), "--out", s(&again)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(again.join("table.txt")).unwrap(), table);
    assert_eq!(
        std::fs::read(again.join("table.json")).unwrap(),
        std::fs::read(out.join("table.json")).unwrap()
    );
}
