//! The reduced schedule used for benchmark sweeps on one CPU core. Only
//! the step count, accumulation and validation cadence differ from
//! [`TrainConfig::default`].

use sre_core::trainer::TrainConfig;

pub fn bench_config() -> TrainConfig {
    TrainConfig {
        iterations: 200,
        accumulation_steps: 1,
        val_every: 50,
        ..TrainConfig::default()
    }
}
