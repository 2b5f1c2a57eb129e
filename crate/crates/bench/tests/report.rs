use std::path::PathBuf;

use sre_bench::lodo::{LodoReport, LodoRun};
use sre_bench::report;
use sre_core::trainer::Mode;

fn run(held_out: &str, mode: Mode, seed: u64, accuracy: f64) -> LodoRun {
    LodoRun {
        held_out: held_out.into(),
        mode,
        seed,
        accuracy,
        val_accuracy: 0.5,
        best_step: 10,
        train_count: 1200,
        val_count: 300,
        test_count: 500,
    }
}

fn sample() -> LodoReport {
    let domains = ["photo", "sketch", "cartoon", "painting"];
    let mut runs = Vec::new();
    for (d, name) in domains.iter().enumerate() {
        for seed in 0..3u64 {
            runs.push(run(name, Mode::Zs, seed, 0.40 + 0.05 * d as f64));
            runs.push(run(name, Mode::Sre, seed, 0.50 + 0.01 * d as f64 + 0.002 * seed as f64));
        }
    }
    LodoReport {
        domains: domains.iter().map(|s| s.to_string()).collect(),
        modes: vec![Mode::Zs, Mode::Sre],
        seeds: vec![0, 1, 2],
        config_digest: "0123abcd".into(),
        runs,
    }
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn text_table_matches_golden() {
    let text = report::render_text(&report::table(&sample()).unwrap());
    let path = golden("table.txt");
    if std::env::var_os("SRE_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(path).unwrap());
}

#[test]
fn one_row_per_mode_with_matching_average() {
    let rep = sample();
    let t = report::table(&rep).unwrap();
    assert_eq!(t.rows.len(), 2);
    for row in &t.rows {
        assert_eq!(row.per_domain.len(), 4);
        assert!((row.average - 100.0 * rep.average(row.mode).unwrap()).abs() < 0.01);
    }
    let json: serde_json::Value = serde_json::from_str(&report::render_json(&t)).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["config_digest"], "0123abcd");
}

#[test]
fn single_mode_single_domain() {
    let rep = LodoReport {
        domains: vec!["a".into(), "b".into()],
        modes: vec![Mode::Ar],
        seeds: vec![5],
        config_digest: "x".into(),
        runs: vec![run("a", Mode::Ar, 5, 0.3333)],
    };
    let t = report::table(&rep).unwrap();
    assert_eq!(t.domains, vec!["a".to_string()]);
    assert_eq!(t.rows.len(), 1);
    let text = report::render_text(&t);
    let data: Vec<&str> = text.lines().skip(2).take_while(|l| !l.starts_with("seeds:")).collect();
    assert_eq!(data, vec!["AR          33.33    33.33"]);
}

#[test]
fn empty_report_is_rejected() {
    let mut rep = sample();
    rep.runs.clear();
    assert!(report::table(&rep).is_err());
}
