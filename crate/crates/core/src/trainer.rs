//! Refocuser training, ablation modes, validation-based selection and
//! inference.
//!
//! SR, SR_EMA and SRE share a single optimization trajectory and only
//! differ in which decoder is used for prediction, so [`train_family`]
//! trains once and tracks all three heads. AR uses a different loss and
//! gets its own trajectory.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::clip::{self, Backbone, TextTable};
use crate::data::{Dataset, Split};
use crate::ensemble::{self, EnsembleState, GateMode};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::optim::{AdamW, AdamWConfig};
use crate::refocus::{
    self, Decoder, DisparityMode, Frozen, LossBreakdown, LossConfig, LossItem, Prepared, Refocuser, RefocuserGrads,
};
use crate::rng::{self, tag};
use crate::simulate::{self, AugmentationRanges};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Zero-shot, no training.
    Zs,
    /// Classification and variance losses only.
    Ar,
    /// Full losses, final decoder.
    Sr,
    /// Full losses, plain EMA decoder.
    SrEma,
    /// Full losses, gated ensemble decoder.
    Sre,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Zs, Mode::Ar, Mode::Sr, Mode::SrEma, Mode::Sre];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Zs => "zs",
            Mode::Ar => "ar",
            Mode::Sr => "sr",
            Mode::SrEma => "sr_ema",
            Mode::Sre => "sre",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Zs => "ZS",
            Mode::Ar => "AR",
            Mode::Sr => "SR",
            Mode::SrEma => "SR+EMA",
            Mode::Sre => "SRE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace(['+', '-'], "_"))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    pub fn simulates(self) -> bool {
        matches!(self, Mode::Sr | Mode::SrEma | Mode::Sre)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters and optimizer moments rounded to `f32` after each step.
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Effective (accumulated) optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr_decoder: f64,
    pub lr_prompt: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub omega: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mode: Mode,
    pub disparity: DisparityMode,
    pub precision: Precision,
    /// Validation cadence in effective steps.
    pub val_every: usize,
    pub val_fraction: f64,
    pub augmentation: AugmentationRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            accumulation_steps: 4,
            lr_decoder: 0.0004,
            lr_prompt: 0.001,
            weight_decay: 0.005,
            lambda: 0.1,
            omega: ensemble::DEFAULT_OMEGA,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mode: Mode::Sre,
            disparity: DisparityMode::Maximize,
            precision: Precision::F32,
            val_every: 100,
            val_fraction: 0.2,
            augmentation: AugmentationRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_decoder", self.lr_decoder),
            ("lr_prompt", self.lr_prompt),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("eps", self.eps),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.iterations == 0 || self.batch_size == 0 || self.accumulation_steps == 0 || self.val_every == 0 {
            return Err(Error::Config("iterations, batch sizes and val_every must be positive".into()));
        }
        if !(0.0 < self.omega && self.omega < 1.0) {
            return Err(Error::Config(format!("omega must lie in (0,1), got {}", self.omega)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0,1)".into()));
        }
        self.augmentation.validate()
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            disparity: self.disparity,
        }
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let a = &self.augmentation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("iterations", self.iterations.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("accumulation_steps", self.accumulation_steps.to_string());
        kv("lr_decoder", self.lr_decoder.to_string());
        kv("lr_prompt", self.lr_prompt.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lambda", self.lambda.to_string());
        kv("omega", self.omega.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.name().into());
        kv("disparity", self.disparity.name().into());
        kv("precision", self.precision.name().into());
        kv("val_every", self.val_every.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("jitter", a.jitter.to_string());
        kv("hue", a.hue.to_string());
        kv("sigma_min", a.sigma.0.to_string());
        kv("sigma_max", a.sigma.1.to_string());
        kv("blend_min", a.blend.0.to_string());
        kv("blend_max", a.blend.1.to_string());
        s
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        let a = &mut self.augmentation;
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "accumulation_steps" => self.accumulation_steps = num(key, value)?,
            "lr_decoder" => self.lr_decoder = num(key, value)?,
            "lr_prompt" => self.lr_prompt = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "omega" => self.omega = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "disparity" => self.disparity = DisparityMode::parse(value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "val_every" => self.val_every = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "jitter" => a.jitter = num(key, value)?,
            "hue" => a.hue = num(key, value)?,
            "sigma_min" => a.sigma.0 = num(key, value)?,
            "sigma_max" => a.sigma.1 = num(key, value)?,
            "blend_min" => a.blend.0 = num(key, value)?,
            "blend_max" => a.blend.1 = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Overlays a `key = value` text (blank lines and `#` comments allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// One record per effective optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub cls: f64,
    pub align: Option<f64>,
    pub var: f64,
    pub total: f64,
    /// Batch attention consistency; absent without simulation.
    pub s_t: Option<f64>,
    /// Gated ensemble bookkeeping.
    pub acceptance: Option<ensemble::Acceptance>,
    pub ensembled: bool,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValRecord {
    pub step: usize,
    pub mode: Mode,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON, steps first.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&serde_json::to_string(r).expect("plain data"));
            s.push('\n');
        }
        for r in &self.validation {
            s.push_str(&serde_json::to_string(r).expect("plain data"));
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A model ready for prediction.
#[derive(Clone, Debug)]
pub struct Model<'a> {
    pub backbone: &'a Backbone,
    pub text: &'a TextTable,
    pub sigma: Tensor,
    /// `None` predicts zero-shot.
    pub decoder: Option<Decoder>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub class: usize,
    pub probs: Vec<f64>,
    /// `Â = A ⊙ M`.
    pub refined_attention: Vec<f64>,
}

impl<'a> Model<'a> {
    pub fn zero_shot(backbone: &'a Backbone, text: &'a TextTable) -> Self {
        Self {
            backbone,
            text,
            sigma: Tensor::ones(&[backbone.config.width]),
            decoder: None,
        }
    }

    /// σ with the ensembled decoder when the checkpoint carries one.
    pub fn from_checkpoint(ck: &'a Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ck.config)?;
        let weights = ck.refocuser.decoder.tensors();
        let ensembled = ck.ensemble.iter().flat_map(|e| e.theta_a.iter());
        if !ck.refocuser.sigma.is_finite() || !weights.into_iter().chain(ensembled).all(Tensor::is_finite) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        let decoder = match cfg.mode {
            Mode::Zs => None,
            _ => Some(match &ck.ensemble {
                Some(e) => e.inference_decoder(&ck.refocuser.decoder)?,
                None => ck.refocuser.decoder.clone(),
            }),
        };
        Ok(Self {
            backbone: &ck.backbone,
            text: &ck.text,
            sigma: ck.refocuser.sigma.clone(),
            decoder,
        })
    }

    pub fn predict_prepared(&self, p: &Prepared) -> Result<Inference> {
        let (probs, mask, attention) = match &self.decoder {
            None => {
                let probs = self.text.predict_probs(&p.embedding)?;
                let (mask, _) = refocus::select_tokens(&p.tokens, &self.sigma)?;
                let enc = self.plain_attention(p)?;
                (probs, mask.into_data(), enc)
            }
            Some(dec) => {
                let mut g = Graph::new();
                let bv = self.backbone.bind(&mut g, false);
                let r = Refocuser {
                    sigma: self.sigma.clone(),
                    decoder: dec.clone(),
                };
                let rv = r.bind(&mut g, false);
                let pv = g.constant(p.patches.clone());
                let tv = g.constant(p.tokens.clone());
                let tp = refocus::two_pass_graph(&mut g, &self.backbone.config, &bv, &rv, pv, tv)?;
                let probs = self.text.probs_graph(&mut g, tp.z_hat)?;
                (
                    g.value(probs).data().to_vec(),
                    g.value(tp.mask).data().to_vec(),
                    g.value(tp.attention).data().to_vec(),
                )
            }
        };
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class probabilities"));
        }
        Ok(Inference {
            class: clip::argmax(&probs),
            probs,
            refined_attention: ensemble::refine_attention(&attention, &mask)?,
        })
    }

    fn plain_attention(&self, p: &Prepared) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bv = self.backbone.bind(&mut g, false);
        let pv = g.constant(p.patches.clone());
        let out = clip::encode(&mut g, &self.backbone.config, &bv, pv, None)?;
        Ok(g.value(out.last_attention).data().to_vec())
    }

    pub fn infer(&self, x: &RasterImage) -> Result<Inference> {
        self.predict_prepared(&Prepared::new(self.backbone, x)?)
    }
}

pub fn infer(ck: &Checkpoint, x: &RasterImage) -> Result<Inference> {
    Model::from_checkpoint(ck)?.infer(x)
}

/// Anything that maps an image to class probabilities.
pub trait Predictor {
    fn predict(&self, index: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub mean_confidence: f64,
    pub count: usize,
}

/// Top-1 accuracy over `labels`, visiting samples in order.
pub fn evaluate<P: Predictor + ?Sized>(p: &P, labels: &[usize], classes: usize) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    let mut correct = 0usize;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut conf = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let probs = p.predict(i)?;
        let c = clip::argmax(&probs);
        conf += probs[c];
        totals[y] += 1;
        if c == y {
            correct += 1;
            hits[y] += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        mean_confidence: conf / labels.len() as f64,
        count: labels.len(),
    })
}

/// A model over a prepared split.
pub struct SplitPredictor<'a> {
    pub model: &'a Model<'a>,
    pub prepared: &'a [&'a Prepared],
}

impl Predictor for SplitPredictor<'_> {
    fn predict(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.model.predict_prepared(&self.prepared[index])?.probs)
    }
}

/// First-pass outputs for every sample of a dataset.
pub fn prepare_all(backbone: &Backbone, dataset: &Dataset) -> Result<Vec<Prepared>> {
    dataset
        .samples
        .iter()
        .map(|s| Prepared::new(backbone, &s.image))
        .collect()
}

/// Evaluates `model` on the dataset samples at `indices`.
pub fn evaluate_indices(
    model: &Model<'_>,
    dataset: &Dataset,
    prepared: &[Prepared],
    indices: &[usize],
) -> Result<EvalResult> {
    let items: Vec<&Prepared> = indices.iter().map(|&i| &prepared[i]).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    evaluate(&SplitPredictor { model, prepared: &items }, &labels, dataset.classes())
}

/// Training inputs.
pub struct TrainData<'a> {
    pub frozen: Frozen<'a>,
    pub dataset: &'a Dataset,
    /// [`prepare_all`] of `dataset` under `frozen.backbone`.
    pub prepared: &'a [Prepared],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<'a> TrainData<'a> {
    /// Splits the given source domains 80/20 (per `val_fraction`).
    pub fn from_sources(
        frozen: Frozen<'a>,
        dataset: &'a Dataset,
        prepared: &'a [Prepared],
        sources: &[usize],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if sources.len() < 2 {
            return Err(Error::Config(format!(
                "multi-source training needs at least two source domains, got {}",
                sources.len()
            )));
        }
        if frozen.text.classes() != dataset.classes() {
            return Err(Error::Config("text table and dataset disagree on classes".into()));
        }
        let Split { train, val } = dataset.split(sources, cfg.val_fraction, cfg.seed)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("empty training or validation split".into()));
        }
        if prepared.len() != dataset.samples.len() {
            return Err(Error::Contract("prepared cache does not match the dataset".into()));
        }
        Ok(Self {
            frozen,
            dataset,
            prepared,
            train,
            val,
        })
    }
}

/// Best-validation snapshot of one mode.
#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: Mode,
    pub checkpoint: Checkpoint,
    pub val_accuracy: f64,
    pub best_step: usize,
}

#[derive(Clone, Debug)]
pub struct FamilyResult {
    pub results: Vec<ModeResult>,
    pub log: TrainingLog,
    /// Gated ensemble state after the final step.
    pub final_ensemble: Option<EnsembleState>,
    /// θ after every optimizer step, when requested.
    pub theta_history: Option<Vec<Vec<Tensor>>>,
}

impl FamilyResult {
    pub fn get(&self, mode: Mode) -> Option<&ModeResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub record_theta: bool,
    /// Skip validation (and report the final step).
    pub skip_validation: bool,
}

/// Which trajectory to run: `Ar` alone, or the shared SR/SR_EMA/SRE one.
fn family_modes(mode: Mode) -> &'static [Mode] {
    match mode {
        Mode::Zs => &[Mode::Zs],
        Mode::Ar => &[Mode::Ar],
        _ => &[Mode::Sr, Mode::SrEma, Mode::Sre],
    }
}

struct Head {
    mode: Mode,
    best: Option<(f64, usize, Checkpoint)>,
}

fn snapshot(
    frozen: Frozen<'_>,
    refocuser: &Refocuser,
    ensemble: Option<&EnsembleState>,
    cfg: &TrainConfig,
    mode: Mode,
    digest: String,
) -> Checkpoint {
    Checkpoint {
        backbone: frozen.backbone.clone(),
        text: frozen.text.clone(),
        refocuser: refocuser.clone(),
        ensemble: ensemble.cloned(),
        config: TrainConfig { mode, ..cfg.clone() }.to_text(),
        log_digest: digest,
    }
}

/// Trains the trajectory that `cfg.mode` belongs to and returns the
/// validation-selected checkpoint of every mode on it.
pub fn train_family(cfg: &TrainConfig, data: &TrainData<'_>, opts: TrainOptions) -> Result<FamilyResult> {
    cfg.validate()?;
    let frozen = data.frozen;
    let bcfg = frozen.backbone.config;
    let mut refocuser = Refocuser::init(&bcfg, cfg.seed);
    let f32_mode = cfg.precision == Precision::F32;
    if f32_mode {
        for t in refocuser.tensors_mut() {
            t.round_to_f32();
        }
    }
    let validate = |model: &Model<'_>| evaluate_indices(model, data.dataset, data.prepared, &data.val);

    if cfg.mode == Mode::Zs {
        let model = Model::zero_shot(frozen.backbone, frozen.text);
        let acc = validate(&model)?.accuracy;
        let log = TrainingLog {
            steps: Vec::new(),
            validation: vec![ValRecord {
                step: 0,
                mode: Mode::Zs,
                accuracy: acc,
            }],
        };
        let ck = snapshot(frozen, &refocuser, None, cfg, Mode::Zs, log.digest());
        return Ok(FamilyResult {
            results: vec![ModeResult {
                mode: Mode::Zs,
                checkpoint: ck,
                val_accuracy: acc,
                best_step: 0,
            }],
            log,
            final_ensemble: None,
            theta_history: None,
        });
    }

    let modes = family_modes(cfg.mode);
    let simulate_on = cfg.mode.simulates();

    let shapes = refocuser.shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
        &shape_refs,
        f32_mode,
    );
    let mut lrs = vec![cfg.lr_decoder; shapes.len()];
    lrs[0] = cfg.lr_prompt;

    let mut gated = simulate_on.then(|| EnsembleState::for_decoder(&refocuser.decoder, cfg.omega));
    let mut open = gated.clone();
    let mut heads: Vec<Head> = modes.iter().map(|&mode| Head { mode, best: None }).collect();
    let mut log = TrainingLog::default();
    let mut history = opts.record_theta.then(Vec::new);
    let loss_cfg = cfg.loss();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let eff = cfg.effective_batch();

    for step in 1..=cfg.iterations {
        let mut picks = Vec::with_capacity(eff);
        while picks.len() < eff {
            if cursor == order.len() {
                order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch]));
                epoch += 1;
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let mut grads = RefocuserGrads::zeros(&refocuser);
        let mut records = Vec::with_capacity(eff);
        for (mb, chunk) in picks.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<Option<Prepared>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    if !simulate_on {
                        return Ok(None);
                    }
                    let index = (mb * cfg.batch_size + j) as u64;
                    let mut r = rng::stream(cfg.seed, &[tag::AUGMENT, step as u64, index]);
                    let x = &data.dataset.samples[data.train[k]].image;
                    let (xt, _) = simulate::simulate_target(x, &cfg.augmentation, &mut r);
                    Prepared::new(frozen.backbone, &xt).map(Some)
                })
                .collect::<Result<_>>()?;
            let items: Vec<LossItem<'_>> = chunk
                .iter()
                .zip(&targets)
                .map(|(&k, t)| LossItem {
                    source: &data.prepared[data.train[k]],
                    target: t.as_ref(),
                    label: data.dataset.samples[data.train[k]].label,
                })
                .collect();
            match refocus::accumulate(frozen, &refocuser, &items, &loss_cfg, 1.0 / eff as f64, Some(&mut grads)) {
                Ok(r) => records.extend(r),
                Err(e) if e.is_numeric() => {
                    log::error!("step {step}: numeric failure ({e}); last records: {records:?}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let breakdown = LossBreakdown::from_records(&records, &loss_cfg)?;
        if !breakdown.total.is_finite() || !grads.is_finite() {
            log::error!("step {step}: non-finite loss or gradient: {breakdown:?}");
            return Err(Error::NonFinite("training loss"));
        }

        {
            let mut params = refocuser.tensors_mut();
            opt.step(&mut params, &grads.tensors, &lrs);
        }

        let mut s_t = None;
        let mut acceptance = None;
        if simulate_on {
            let per: Vec<f64> = records
                .iter()
                .map(|r| {
                    let a_s = ensemble::refine_attention(&r.attention_source, &r.mask_source)?;
                    let tgt_a = r.attention_target.as_deref().unwrap_or_default();
                    let tgt_m = r.mask_target.as_deref().unwrap_or_default();
                    let a_t = ensemble::refine_attention(tgt_a, tgt_m)?;
                    Ok(ensemble::attention_consistency(&a_s, &a_t)?.value)
                })
                .collect::<Result<_>>()?;
            let s = ensemble::batch_consistency(&per)?;
            s_t = Some(s);
            let theta = refocuser.decoder.tensors();
            if let Some(st) = gated.as_mut() {
                acceptance = Some(st.maybe_ensemble(&theta, s, GateMode::Gated)?);
            }
            if let Some(st) = open.as_mut() {
                st.maybe_ensemble(&theta, s, GateMode::AlwaysOpen)?;
            }
        }
        if let Some(h) = history.as_mut() {
            h.push(refocuser.decoder.to_flat());
        }
        log.steps.push(StepRecord {
            step,
            cls: breakdown.cls,
            align: breakdown.align,
            var: breakdown.var,
            total: breakdown.total,
            s_t,
            acceptance,
            ensembled: acceptance.is_some_and(|a| a.accepted),
            clamped: breakdown.clamped,
        });

        let validate_now = !opts.skip_validation && (step % cfg.val_every == 0 || step == cfg.iterations);
        if validate_now || (opts.skip_validation && step == cfg.iterations) {
            for head in &mut heads {
                let ens = match head.mode {
                    Mode::Sre => gated.as_ref(),
                    Mode::SrEma => open.as_ref(),
                    _ => None,
                };
                let ck = snapshot(frozen, &refocuser, ens, cfg, head.mode, String::new()).canonical()?;
                let acc = if opts.skip_validation {
                    f64::NAN
                } else {
                    let model = Model::from_checkpoint(&ck)?;
                    validate(&model)?.accuracy
                };
                log.validation.push(ValRecord {
                    step,
                    mode: head.mode,
                    accuracy: acc,
                });
                let better = match &head.best {
                    None => true,
                    Some((best, _, _)) => acc > *best,
                };
                if better {
                    head.best = Some((acc, step, ck));
                }
            }
        }
    }

    let digest = log.digest();
    let results = heads
        .into_iter()
        .map(|h| {
            let (acc, step, mut ck) = h.best.expect("the final step always validates");
            ck.log_digest = digest.clone();
            ModeResult {
                mode: h.mode,
                checkpoint: ck,
                val_accuracy: acc,
                best_step: step,
            }
        })
        .collect();
    Ok(FamilyResult {
        results,
        log,
        final_ensemble: gated,
        theta_history: history,
    })
}

/// Trains `cfg.mode` and returns its validation-selected checkpoint.
pub fn train(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<(ModeResult, TrainingLog)> {
    let fam = train_family(cfg, data, TrainOptions::default())?;
    let r = fam
        .get(cfg.mode)
        .cloned()
        .ok_or_else(|| Error::Contract("mode missing from its own family".into()))?;
    Ok((r, fam.log))
}
