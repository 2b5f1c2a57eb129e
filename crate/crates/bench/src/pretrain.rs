//! Contrastive pretraining on styles that never appear in the benchmark.

use std::path::Path;

use sha2::{Digest, Sha256};

use sre_core::checkpoint;
use sre_core::clip::{self, Backbone, LabeledImage, PretrainConfig, TextTable};
use sre_core::rng::{self, tag};
use sre_core::Result;

use crate::synth::{self, Shape, CLASS_NAMES};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSpec {
    pub config: PretrainConfig,
    pub per_cell: usize,
    /// Images per class drawn in a freshly randomized style each.
    pub random_per_class: usize,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            config: PretrainConfig::default(),
            per_cell: 60,
            random_per_class: 4000,
            seed: 7,
        }
    }
}

impl PretrainSpec {
    /// Short digest of everything that affects the pretrained weights.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_string(&(&self.config, self.per_cell, self.random_per_class, self.seed)).expect("plain data");
        sre_core::trainer::hex(&Sha256::digest(json.as_bytes())[..8])
    }
}

pub fn corpus(spec: &PretrainSpec) -> Vec<LabeledImage> {
    let size = spec.config.encoder.image_size;
    let mut out = Vec::new();
    for (d, st) in synth::pretrain_styles().iter().enumerate() {
        for (c, shape) in Shape::ALL.iter().enumerate() {
            for i in 0..spec.per_cell {
                let mut r = rng::stream(spec.seed, &[tag::PRETRAIN, d as u64, c as u64, i as u64]);
                out.push(LabeledImage {
                    image: synth::render(*shape, st, size, &mut r).0.quantize(),
                    label: c,
                });
            }
        }
    }
    let random = synth::pretrain_styles().len() as u64;
    for (c, shape) in Shape::ALL.iter().enumerate() {
        for i in 0..spec.random_per_class {
            let mut r = rng::stream(spec.seed, &[tag::PRETRAIN, random, c as u64, i as u64]);
            let st = synth::random_style(&mut r);
            out.push(LabeledImage {
                image: synth::render(*shape, &st, size, &mut r).0.quantize(),
                label: c,
            });
        }
    }
    out
}

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn run(spec: &PretrainSpec) -> Result<(Backbone, TextTable)> {
    let data = corpus(spec);
    clip::pretrain_contrastive(&data, &class_names(), &spec.config, spec.seed, |s| {
        if s.step % 50 == 0 {
            log::info!("pretrain step {} loss {:.4} scale {:.2}", s.step, s.loss, s.logit_scale);
        }
    })
}

/// Loads the frozen pair from `dir` or pretrains and stores it there.
pub fn cached(spec: &PretrainSpec, dir: &Path) -> Result<(Backbone, TextTable)> {
    let cache = dir.join(format!("pretrain-{}.srec", spec.cache_key()));
    if let Ok(bytes) = std::fs::read(&cache) {
        if let Ok(pair) = checkpoint::decode_frozen(&bytes) {
            return Ok(pair);
        }
    }
    let (bb, text) = run(spec)?;
    std::fs::create_dir_all(dir)?;
    // write then rename so concurrent readers never see a partial file
    let tmp = cache.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, checkpoint::frozen_bytes(&bb, &text))?;
    std::fs::rename(&tmp, &cache)?;
    Ok((bb, text))
}
