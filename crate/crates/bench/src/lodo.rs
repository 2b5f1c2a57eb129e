//! Leave-one-domain-out protocol: train on every domain but one, test on
//! the one left out, for each mode and seed.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sre_core::data::Dataset;
use sre_core::refocus::{Frozen, Prepared};
use sre_core::trainer::{self, Mode, Model, TrainConfig, TrainData, TrainOptions};
use sre_core::{Error, Result};

/// One (held-out domain, mode, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoRun {
    pub held_out: String,
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_step: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub domains: Vec<String>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// sha256 of the shared training config text.
    pub config_digest: String,
    pub runs: Vec<LodoRun>,
}

impl LodoReport {
    /// Mean over seeds of the held-out accuracy for `domain`.
    pub fn accuracy(&self, mode: Mode, domain: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.mode == mode && r.held_out == domain)
            .map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean of the per-domain entries.
    pub fn average(&self, mode: Mode) -> Option<f64> {
        let per: Option<Vec<f64>> = self.domains.iter().map(|d| self.accuracy(mode, d)).collect();
        let per = per?;
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("report: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct LodoConfig {
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

/// Sample indices of one fold.
#[derive(Clone, Debug)]
pub struct Fold {
    pub held_out: usize,
    pub sources: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    pub fn new(dataset: &Dataset, held_out: usize, cfg: &TrainConfig) -> Result<Self> {
        let sources: Vec<usize> = (0..dataset.domain_names.len()).filter(|&d| d != held_out).collect();
        let split = dataset.split(&sources, cfg.val_fraction, cfg.seed)?;
        if split.train.is_empty() || split.val.is_empty() {
            return Err(Error::Config(format!(
                "holding out {} leaves an empty training or validation split",
                dataset.domain_names[held_out]
            )));
        }
        let fold = Self {
            held_out,
            sources,
            train: split.train,
            val: split.val,
            test: dataset.in_domains(&[held_out]),
        };
        fold.check_disjoint(dataset)?;
        Ok(fold)
    }

    /// Held-out sample ids appear in neither the training nor the
    /// validation side.
    pub fn check_disjoint(&self, dataset: &Dataset) -> Result<()> {
        let ids = |idx: &[usize]| -> BTreeSet<&str> { idx.iter().map(|&i| dataset.samples[i].id.as_str()).collect() };
        let test = ids(&self.test);
        let seen: BTreeSet<&str> = ids(&self.train).union(&ids(&self.val)).copied().collect();
        if let Some(id) = test.intersection(&seen).next() {
            return Err(Error::Contract(format!("held-out sample {id} leaked into training")));
        }
        Ok(())
    }
}

/// Trajectories to run for the requested modes. SR, SR+EMA and SRE share
/// one.
fn trajectories(modes: &[Mode]) -> Vec<Mode> {
    let mut out = Vec::new();
    for &m in modes {
        let root = match m {
            Mode::Sr | Mode::SrEma | Mode::Sre => Mode::Sre,
            other => other,
        };
        if !out.contains(&root) {
            out.push(root);
        }
    }
    out
}

/// Runs the protocol. When `out_dir` is given, each selected checkpoint is
/// written to `<out_dir>/<domain>/<mode>-seed<seed>.srec`.
pub fn run_lodo(
    cfg: &LodoConfig,
    frozen: Frozen<'_>,
    dataset: &Dataset,
    prepared: &[Prepared],
    out_dir: Option<&Path>,
    mut on_run: impl FnMut(&LodoRun),
) -> Result<LodoReport> {
    cfg.train.validate()?;
    if dataset.domain_names.len() < 2 {
        return Err(Error::Config("leave-one-domain-out needs at least two domains".into()));
    }
    if cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("no modes or seeds requested".into()));
    }
    let mut runs = Vec::new();
    for held in 0..dataset.domain_names.len() {
        let domain = &dataset.domain_names[held];
        for &seed in &cfg.seeds {
            let tcfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let fold = Fold::new(dataset, held, &tcfg)?;
            for root in trajectories(&cfg.modes) {
                let results = if root == Mode::Zs {
                    // zero-shot needs no sources; validate on the same split
                    // so the record stays comparable
                    let model = Model::zero_shot(frozen.backbone, frozen.text);
                    let val = trainer::evaluate_indices(&model, dataset, prepared, &fold.val)?.accuracy;
                    vec![(Mode::Zs, None, val, 0)]
                } else {
                    let data = TrainData {
                        frozen,
                        dataset,
                        prepared,
                        train: fold.train.clone(),
                        val: fold.val.clone(),
                    };
                    let fam = trainer::train_family(&TrainConfig { mode: root, ..tcfg.clone() }, &data, TrainOptions::default())?;
                    fam.results
                        .into_iter()
                        .filter(|r| cfg.modes.contains(&r.mode))
                        .map(|r| (r.mode, Some(r.checkpoint), r.val_accuracy, r.best_step))
                        .collect()
                };
                for (mode, ck, val_accuracy, best_step) in results {
                    let accuracy = match &ck {
                        Some(ck) => {
                            let model = Model::from_checkpoint(ck)?;
                            trainer::evaluate_indices(&model, dataset, prepared, &fold.test)?.accuracy
                        }
                        None => {
                            let model = Model::zero_shot(frozen.backbone, frozen.text);
                            trainer::evaluate_indices(&model, dataset, prepared, &fold.test)?.accuracy
                        }
                    };
                    if let (Some(dir), Some(ck)) = (out_dir, &ck) {
                        let path = dir.join(domain).join(format!("{}-seed{seed}.srec", mode.name()));
                        std::fs::create_dir_all(path.parent().expect("nested path"))?;
                        ck.save(&path)?;
                    }
                    let run = LodoRun {
                        held_out: domain.clone(),
                        mode,
                        seed,
                        accuracy,
                        val_accuracy,
                        best_step,
                        train_count: fold.train.len(),
                        val_count: fold.val.len(),
                        test_count: fold.test.len(),
                    };
                    on_run(&run);
                    runs.push(run);
                }
            }
        }
    }
    // stable order regardless of trajectory grouping
    runs.sort_by(|a, b| {
        let da = dataset.domain_names.iter().position(|d| *d == a.held_out);
        let db = dataset.domain_names.iter().position(|d| *d == b.held_out);
        (da, a.mode, a.seed).cmp(&(db, b.mode, b.seed))
    });
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    Ok(LodoReport {
        domains: dataset.domain_names.clone(),
        modes,
        seeds: cfg.seeds.clone(),
        config_digest: trainer::hex(&Sha256::digest(cfg.train.to_text().as_bytes())),
        runs,
    })
}
