use sre_bench::dataset;
use sre_bench::lodo::{self, Fold, LodoConfig, LodoReport};
use sre_bench::synth::{self, DatasetSpec};
use sre_core::clip::{Backbone, EncoderConfig, TextTable};
use sre_core::data::Dataset;
use sre_core::refocus::Frozen;
use sre_core::rng;
use sre_core::tensor::Tensor;
use sre_core::trainer::{self, Mode, Model, Precision, TrainConfig};
use sre_core::Error;

fn setup(domains: usize) -> (Backbone, TextTable, Dataset) {
    let spec = DatasetSpec {
        domains: synth::benchmark_styles().into_iter().take(domains).collect(),
        per_cell: 4,
        image_size: 16,
        ..Default::default()
    };
    let ds = dataset::in_memory(&spec, 3).unwrap();
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        layers: 2,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    let bb = Backbone::init(cfg, 5).unwrap();
    let raw = Tensor::randn(&mut rng::stream(6, &[]), &[ds.classes(), 8], 1.0);
    let text = TextTable::from_raw(ds.class_names.clone(), &raw, 0.07).unwrap();
    (bb, text, ds)
}

fn quick() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        batch_size: 2,
        accumulation_steps: 1,
        val_every: 2,
        precision: Precision::F64,
        ..Default::default()
    }
}

fn sweep(domains: usize, modes: Vec<Mode>, seeds: Vec<u64>) -> (Dataset, Backbone, TextTable, LodoReport) {
    let (bb, text, ds) = setup(domains);
    let prep = trainer::prepare_all(&bb, &ds).unwrap();
    let cfg = LodoConfig {
        train: quick(),
        modes,
        seeds,
    };
    let mut seen = 0;
    let rep = lodo::run_lodo(&cfg, Frozen { backbone: &bb, text: &text }, &ds, &prep, None, |_| seen += 1).unwrap();
    assert_eq!(seen, rep.runs.len());
    (ds, bb, text, rep)
}

#[test]
fn every_fold_mode_and_seed_is_run() {
    let (_, _, _, rep) = sweep(3, vec![Mode::Zs, Mode::Ar, Mode::Sre], vec![0, 1]);
    assert_eq!(rep.runs.len(), 3 * 3 * 2);
    for r in &rep.runs {
        assert_eq!(r.test_count, 5 * 4);
        assert_eq!(r.train_count + r.val_count, 2 * 5 * 4);
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
    let back = LodoReport::from_json(&rep.to_json()).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn zero_shot_ignores_the_sources() {
    let (ds, bb, text, rep) = sweep(3, vec![Mode::Zs], vec![0, 4]);
    let prep = trainer::prepare_all(&bb, &ds).unwrap();
    let model = Model::zero_shot(&bb, &text);
    for (d, name) in ds.domain_names.iter().enumerate() {
        let direct = trainer::evaluate_indices(&model, &ds, &prep, &ds.in_domains(&[d])).unwrap().accuracy;
        for r in rep.runs.iter().filter(|r| &r.held_out == name) {
            assert_eq!(r.accuracy, direct);
            assert_eq!(r.best_step, 0);
        }
    }
}

#[test]
fn average_is_the_mean_of_domains() {
    let (_, _, _, rep) = sweep(2, vec![Mode::Sr, Mode::SrEma], vec![0]);
    for m in [Mode::Sr, Mode::SrEma] {
        let per: Vec<f64> = rep.domains.iter().map(|d| rep.accuracy(m, d).unwrap()).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((rep.average(m).unwrap() - mean).abs() < 1e-9);
    }
    assert!(rep.accuracy(Mode::Sre, &rep.domains[0]).is_none());
}

#[test]
fn folds_never_leak() {
    let (_, _, ds) = setup(4);
    for held in 0..4 {
        let f = Fold::new(&ds, held, &quick()).unwrap();
        assert_eq!(f.sources.len(), 3);
        assert!(f.test.iter().all(|&i| ds.samples[i].domain == held));
        assert!(f.train.iter().chain(&f.val).all(|&i| ds.samples[i].domain != held));
    }
    let mut f = Fold::new(&ds, 0, &quick()).unwrap();
    f.train.push(f.test[0]);
    assert!(matches!(f.check_disjoint(&ds), Err(Error::Contract(_))));
}

#[test]
fn checkpoints_are_written_per_run() {
    let (bb, text, ds) = setup(2);
    let prep = trainer::prepare_all(&bb, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = LodoConfig {
        train: quick(),
        modes: vec![Mode::Zs, Mode::Ar],
        seeds: vec![2],
    };
    lodo::run_lodo(&cfg, Frozen { backbone: &bb, text: &text }, &ds, &prep, Some(dir.path()), |_| ()).unwrap();
    for d in &ds.domain_names {
        assert!(dir.path().join(d).join("ar-seed2.srec").exists());
        assert!(!dir.path().join(d).join("zs-seed2.srec").exists());
    }
}

#[test]
fn empty_requests_are_config_errors() {
    let (bb, text, ds) = setup(2);
    let prep = trainer::prepare_all(&bb, &ds).unwrap();
    let cfg = LodoConfig {
        train: quick(),
        modes: vec![],
        seeds: vec![0],
    };
    let err = lodo::run_lodo(&cfg, Frozen { backbone: &bb, text: &text }, &ds, &prep, None, |_| ()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
