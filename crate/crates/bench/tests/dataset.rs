use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sre_bench::dataset;
use sre_bench::synth::{self, DatasetSpec};
use sre_core::Error;

fn small() -> DatasetSpec {
    DatasetSpec {
        per_cell: 3,
        image_size: 16,
        ..Default::default()
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_trees() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    dataset::write_tree(a.path(), &small(), 4, false).unwrap();
    dataset::write_tree(b.path(), &small(), 4, false).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 4 * 5 * 3 + 1);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    dataset::write_tree(c.path(), &small(), 5, false).unwrap();
    assert_ne!(tree(c.path()), ta);
}

#[test]
fn default_spec_has_two_thousand_rows() {
    let spec = DatasetSpec::default();
    let gen = synth::generate(&spec, 0).unwrap();
    assert_eq!(gen.len(), 2000);
    let mut cells = BTreeMap::new();
    for g in &gen {
        *cells.entry((g.domain, g.label)).or_insert(0) += 1;
        assert!(g.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(cells.len(), 20);
    assert!(cells.values().all(|&n| n == 100));
}

#[test]
fn reload_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let n = dataset::write_tree(dir.path(), &small(), 9, false).unwrap();
    let loaded = dataset::load(dir.path()).unwrap();
    let mem = dataset::in_memory(&small(), 9).unwrap();
    assert_eq!(loaded.samples.len(), n);
    assert_eq!(loaded, mem);
    let manifest = fs::read_to_string(dir.path().join(dataset::MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count(), n + 1);
}

#[test]
fn non_empty_root_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("stray.txt"), "x").unwrap();
    let err = dataset::write_tree(dir.path(), &small(), 0, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    dataset::write_tree(dir.path(), &small(), 0, true).unwrap();
    assert!(!dir.path().join("stray.txt").exists());
    assert!(dir.path().join(dataset::MANIFEST).exists());
}

#[test]
fn one_class_is_rejected() {
    let spec = DatasetSpec {
        classes: vec!["circle".into()],
        ..small()
    };
    assert!(matches!(synth::generate(&spec, 0), Err(Error::Config(_))));
    let spec = DatasetSpec {
        classes: vec!["circle".into(), "hexagon".into()],
        ..small()
    };
    assert!(spec.validate().is_err());
}

#[test]
fn corrupt_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset::write_tree(dir.path(), &small(), 0, false).unwrap();
    fs::write(dir.path().join(dataset::MANIFEST), "nope\n").unwrap();
    assert!(matches!(dataset::load(dir.path()), Err(Error::Input(_))));
}
