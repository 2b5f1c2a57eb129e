#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use sre_bench::pretrain::{self, PretrainSpec};
use sre_core::clip::{Backbone, TextTable};

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pretrain")
}

/// The default frozen encoder pair, pretrained once per target directory.
/// Tests in one binary share a single load so a cold cache is filled once.
pub fn frozen_pair() -> (Backbone, TextTable) {
    static PAIR: OnceLock<(Backbone, TextTable)> = OnceLock::new();
    PAIR.get_or_init(|| pretrain::cached(&PretrainSpec::default(), &cache_dir()).expect("pretraining"))
        .clone()
}
