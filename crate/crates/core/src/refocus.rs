//! Attention refocuser: token-selection prompt σ plus a B-layer decoder
//! whose per-layer outputs bias the value input of the frozen encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::clip::{self, Backbone, BackboneVars, EncoderConfig, RefocusParams, TextTable};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::rng;
use crate::simulate::{self, AugmentationRanges};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const DECODER_FIELDS: [&str; 6] = ["ln_g", "ln_b", "w1", "b1", "w2", "b2"];

impl DecoderLayer {
    fn init(d: usize, rng: &mut rng::Stream) -> Self {
        Self {
            ln_g: Tensor::ones(&[d]),
            ln_b: Tensor::zeros(&[d]),
            w1: Tensor::randn(rng, &[d, d], (1.0 / d as f64).sqrt()),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::randn(rng, &[d, d], 0.02),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.ln_g, &self.ln_b, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Decoder weights θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Residual connections; disabled only in tests.
    pub residual: bool,
}

impl Decoder {
    pub fn init(layers: usize, d: usize, rng: &mut rng::Stream) -> Self {
        Self {
            layers: (0..layers).map(|_| DecoderLayer::init(d, rng)).collect(),
            residual: true,
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|b| DECODER_FIELDS.iter().map(move |f| format!("layer{b}.{f}")))
            .collect()
    }

    /// Flat parameter list in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn to_flat(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Same structure with the given flat parameters.
    pub fn with_flat(&self, flat: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != flat.len() {
            return Err(Error::Contract(format!("decoder has {} tensors, got {}", slots.len(), flat.len())));
        }
        for (slot, t) in slots.into_iter().zip(flat) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("decoder", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<[Var; 6]> {
        self.layers
            .iter()
            .map(|l| l.tensors().map(|t| g.leaf(t.clone(), trainable)))
            .collect()
    }
}

/// σ and θ, the only trainable parameters after pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Refocuser {
    pub sigma: Tensor,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct RefocuserVars {
    pub sigma: Var,
    pub layers: Vec<[Var; 6]>,
    residual: bool,
}

impl RefocuserVars {
    /// σ first, then θ in [`Decoder::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.sigma];
        v.extend(self.layers.iter().flatten());
        v
    }
}

impl Refocuser {
    /// σ = ones, θ random.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::INIT, 0xDEC0]);
        Self {
            sigma: Tensor::ones(&[cfg.width]),
            decoder: Decoder::init(cfg.layers, cfg.width, &mut r),
        }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.decoder.layers.len() != cfg.layers {
            return Err(Error::Config(format!(
                "decoder has {} layers, encoder has {}",
                self.decoder.layers.len(),
                cfg.layers
            )));
        }
        if self.sigma.shape() != [cfg.width] {
            return Err(Error::Config(format!("prompt width {:?}, expected {}", self.sigma.shape(), cfg.width)));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> RefocuserVars {
        RefocuserVars {
            sigma: g.leaf(self.sigma.clone(), trainable),
            layers: self.decoder.bind(g, trainable),
            residual: self.decoder.residual,
        }
    }

    /// Number of trainable tensors (σ plus θ).
    pub fn tensor_count(&self) -> usize {
        1 + self.decoder.layers.len() * DECODER_FIELDS.len()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.sigma];
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        std::iter::once(&self.sigma)
            .chain(self.decoder.tensors())
            .map(|t| t.shape().to_vec())
            .collect()
    }
}

/// Mask `M[L]` and selected tokens `z̃ = M ⊙ z`.
pub fn select_tokens_graph(g: &mut Graph, z: Var, sigma: Var) -> Result<(Var, Var)> {
    let m = g.cosine_rows(z, sigma)?;
    let zt = g.mul_rows(z, m)?;
    Ok((m, zt))
}

pub fn select_tokens(z: &Tensor, sigma: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let sv = g.constant(sigma.clone());
    let (m, zt) = select_tokens_graph(&mut g, zv, sv)?;
    Ok((g.value(m).clone(), g.value(zt).clone()))
}

/// `Var(M^s) + Var(M^t)`, population variance over token positions.
pub fn variance_term(ms: &[f64], mt: &[f64]) -> f64 {
    fn var(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }
    var(ms) + var(mt)
}

/// Runs the decoder; entry `b` is the output of decoder layer `b`.
pub fn decode_refocus_graph(g: &mut Graph, zt: Var, layers: &[[Var; 6]], residual: bool) -> Result<Vec<Var>> {
    let mut x = zt;
    let mut out = Vec::with_capacity(layers.len());
    for &[ln_g, ln_b, w1, b1, w2, b2] in layers {
        let h = g.layer_norm(x, ln_g, ln_b, clip::LN_EPS)?;
        let h = g.matmul(h, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, b2)?;
        x = if residual { g.add(x, h)? } else { h };
        out.push(x);
    }
    Ok(out)
}

pub fn decode_refocus(zt: &Tensor, decoder: &Decoder) -> Result<RefocusParams> {
    let mut g = Graph::new();
    let z = g.constant(zt.clone());
    let vars = decoder.bind(&mut g, false);
    let e = decode_refocus_graph(&mut g, z, &vars, decoder.residual)?;
    Ok(RefocusParams {
        layers: e.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Handles produced by [`two_pass_graph`].
#[derive(Clone, Copy, Debug)]
pub struct TwoPass {
    /// Refocused embedding ẑ, `[d]`.
    pub z_hat: Var,
    /// Task-relevant mask from the first pass, `[L]`.
    pub mask: Var,
    /// Class-token attention row of the refocused pass, `[L]`.
    pub attention: Var,
}

/// Plain first pass: `(tokens, embedding)`. Holds no trainable state, so
/// callers may reuse it.
pub fn first_pass(backbone: &Backbone, patches: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bv = backbone.bind(&mut g, false);
    let p = g.constant(patches.clone());
    let out = clip::encode(&mut g, &backbone.config, &bv, p, None)?;
    Ok((g.value(out.tokens).clone(), g.value(out.embedding).clone()))
}

/// Pass 2 on top of precomputed first-pass tokens.
pub fn two_pass_graph(
    g: &mut Graph,
    cfg: &EncoderConfig,
    bv: &BackboneVars,
    rv: &RefocuserVars,
    patches: Var,
    tokens: Var,
) -> Result<TwoPass> {
    let (mask, zt) = select_tokens_graph(g, tokens, rv.sigma)?;
    let e = decode_refocus_graph(g, zt, &rv.layers, rv.residual)?;
    let out = clip::encode(g, cfg, bv, patches, Some(&e))?;
    Ok(TwoPass {
        z_hat: out.embedding,
        mask,
        attention: out.last_attention,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassOutput {
    pub z_hat: Tensor,
    pub mask: Tensor,
    pub attention: Tensor,
}

pub fn two_pass_forward(x: &RasterImage, backbone: &Backbone, refocuser: &Refocuser) -> Result<TwoPassOutput> {
    refocuser.check(&backbone.config)?;
    let patches = clip::patchify(&backbone.config, x)?;
    let (tokens, _) = first_pass(backbone, &patches)?;
    let mut g = Graph::new();
    let bv = backbone.bind(&mut g, false);
    let rv = refocuser.bind(&mut g, false);
    let p = g.constant(patches);
    let t = g.constant(tokens);
    let tp = two_pass_graph(&mut g, &backbone.config, &bv, &rv, p, t)?;
    Ok(TwoPassOutput {
        z_hat: g.value(tp.z_hat).clone(),
        mask: g.value(tp.mask).clone(),
        attention: g.value(tp.attention).clone(),
    })
}

/// Sign applied to the variance term in the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisparityMode {
    /// `total = cls + align − λ·var`: pushes masks apart.
    #[default]
    Maximize,
    /// `total = cls + align + λ·var`.
    Literal,
}

impl DisparityMode {
    pub fn sign(self) -> f64 {
        match self {
            DisparityMode::Maximize => -1.0,
            DisparityMode::Literal => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DisparityMode::Maximize => "maximize",
            DisparityMode::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "maximize" => Ok(Self::Maximize),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("unknown disparity mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub disparity: DisparityMode,
}

/// One training example. `target` is the simulated copy of `source`; when
/// absent the alignment loss is skipped and the variance term uses the
/// source mask alone.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub source: &'a Prepared,
    pub target: Option<&'a Prepared>,
    pub label: usize,
}

/// Patches and first-pass outputs of one image.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub patches: Tensor,
    pub tokens: Tensor,
    /// Plain (zero-shot) embedding.
    pub embedding: Tensor,
}

impl Prepared {
    pub fn new(backbone: &Backbone, x: &RasterImage) -> Result<Self> {
        let patches = clip::patchify(&backbone.config, x)?;
        let (tokens, embedding) = first_pass(backbone, &patches)?;
        Ok(Self {
            patches,
            tokens,
            embedding,
        })
    }
}

/// Everything needed to recompute one sample's loss contribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub label: usize,
    pub p_source: f64,
    pub p_target: Option<f64>,
    pub mask_source: Vec<f64>,
    pub mask_target: Option<Vec<f64>>,
    pub attention_source: Vec<f64>,
    pub attention_target: Option<Vec<f64>>,
    /// A probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

impl SampleRecord {
    pub fn var_term(&self) -> f64 {
        match &self.mask_target {
            Some(mt) => variance_term(&self.mask_source, mt),
            None => variance_term(&self.mask_source, &[0.0]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    /// Absent when simulation is off.
    pub align: Option<f64>,
    pub var: f64,
    pub total: f64,
    pub lambda: f64,
    pub sign: f64,
    pub clamped: bool,
}

impl LossBreakdown {
    /// Mean over records, recomputed from logged values.
    pub fn from_records(records: &[SampleRecord], cfg: &LossConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n = records.len() as f64;
        let nll = |p: f64| -p.max(PROB_FLOOR).ln();
        let cls = records.iter().map(|r| nll(r.p_source)).sum::<f64>() / n;
        let align = if records.iter().all(|r| r.p_target.is_some()) {
            Some(records.iter().map(|r| nll(r.p_target.unwrap_or(1.0))).sum::<f64>() / n)
        } else {
            None
        };
        let var = records.iter().map(SampleRecord::var_term).sum::<f64>() / n;
        let sign = cfg.disparity.sign();
        Ok(Self {
            cls,
            align,
            var,
            total: cls + align.unwrap_or(0.0) + sign * cfg.lambda * var,
            lambda: cfg.lambda,
            sign,
            clamped: records.iter().any(|r| r.clamped),
        })
    }
}

/// Frozen context shared by every loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Frozen<'a> {
    pub backbone: &'a Backbone,
    pub text: &'a TextTable,
}

/// Per-sample loss node, `(cls + align + sign·λ·var)·weight`.
fn sample_graph(
    g: &mut Graph,
    frozen: Frozen<'_>,
    bv: &BackboneVars,
    rv: &RefocuserVars,
    item: &LossItem<'_>,
    cfg: &LossConfig,
    weight: f64,
) -> Result<(Var, SampleRecord)> {
    let bcfg = &frozen.backbone.config;
    if item.label >= frozen.text.classes() {
        return Err(Error::UnknownLabel(item.label));
    }
    let run = |g: &mut Graph, p: &Prepared| -> Result<(TwoPass, Var)> {
        let pv = g.constant(p.patches.clone());
        let tv = g.constant(p.tokens.clone());
        let tp = two_pass_graph(g, bcfg, bv, rv, pv, tv)?;
        let probs = frozen.text.probs_graph(g, tp.z_hat)?;
        let py = g.pick(probs, item.label)?;
        Ok((tp, py))
    };
    let (src, ps) = run(g, item.source)?;
    let mut terms = Vec::with_capacity(3);
    let ls = g.ln_clamped(ps, PROB_FLOOR);
    terms.push(g.scale(ls, -1.0));
    let p_source = g.value(ps).item();
    let mut clamped = p_source < PROB_FLOOR;

    let mut record = SampleRecord {
        label: item.label,
        p_source,
        p_target: None,
        mask_source: g.value(src.mask).data().to_vec(),
        mask_target: None,
        attention_source: g.value(src.attention).data().to_vec(),
        attention_target: None,
        clamped: false,
    };
    let var = match item.target {
        Some(t) => {
            let (tgt, pt) = run(g, t)?;
            let lt = g.ln_clamped(pt, PROB_FLOOR);
            terms.push(g.scale(lt, -1.0));
            let p_target = g.value(pt).item();
            clamped |= p_target < PROB_FLOOR;
            record.p_target = Some(p_target);
            record.mask_target = Some(g.value(tgt.mask).data().to_vec());
            record.attention_target = Some(g.value(tgt.attention).data().to_vec());
            let vs = g.variance(src.mask);
            let vt = g.variance(tgt.mask);
            g.add(vs, vt)?
        }
        None => g.variance(src.mask),
    };
    terms.push(g.scale(var, cfg.disparity.sign() * cfg.lambda));
    record.clamped = clamped;
    let total = g.add_all(&terms)?;
    Ok((g.scale(total, weight), record))
}

/// Gradients for σ and θ in [`RefocuserVars::all`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RefocuserGrads {
    pub tensors: Vec<Tensor>,
}

impl RefocuserGrads {
    pub fn zeros(r: &Refocuser) -> Self {
        Self {
            tensors: r.shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Adds `weight · ∇ loss_i` of every item into `grads` and returns the
/// per-sample records. With `weight = 1/n` over a batch of `n` this is the
/// gradient of the mean loss.
pub fn accumulate(
    frozen: Frozen<'_>,
    refocuser: &Refocuser,
    items: &[LossItem<'_>],
    cfg: &LossConfig,
    weight: f64,
    grads: Option<&mut RefocuserGrads>,
) -> Result<Vec<SampleRecord>> {
    refocuser.check(&frozen.backbone.config)?;
    let mut records = Vec::with_capacity(items.len());
    let mut grads = grads;
    for item in items {
        let mut g = Graph::new();
        let bv = frozen.backbone.bind(&mut g, false);
        let rv = refocuser.bind(&mut g, grads.is_some());
        let (loss, rec) = sample_graph(&mut g, frozen, &bv, &rv, item, cfg, weight)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        if let Some(acc) = grads.as_deref_mut() {
            g.backward(loss)?;
            for (slot, v) in acc.tensors.iter_mut().zip(rv.all()) {
                if let Some(gr) = g.grad(v) {
                    slot.add_assign(gr);
                }
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Batch loss as a single graph node over trainable leaves; used for
/// gradient checking.
pub fn total_loss_graph(
    g: &mut Graph,
    frozen: Frozen<'_>,
    rv: &RefocuserVars,
    items: &[LossItem<'_>],
    cfg: &LossConfig,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let bv = frozen.backbone.bind(g, false);
    let w = 1.0 / items.len() as f64;
    let mut parts = Vec::with_capacity(items.len());
    for item in items {
        parts.push(sample_graph(g, frozen, &bv, rv, item, cfg, w)?.0);
    }
    g.add_all(&parts)
}

/// Simulates a target per source image with `rng`, then evaluates the
/// batch loss.
pub fn total_loss<R: Rng + ?Sized>(
    frozen: Frozen<'_>,
    refocuser: &Refocuser,
    batch: &[(&RasterImage, usize)],
    ranges: &AugmentationRanges,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<SampleRecord>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut prepared = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        let (xt, _) = simulate::simulate_target(x, ranges, rng);
        prepared.push((Prepared::new(frozen.backbone, x)?, Prepared::new(frozen.backbone, &xt)?));
    }
    let items: Vec<LossItem<'_>> = prepared
        .iter()
        .zip(batch)
        .map(|((s, t), (_, y))| LossItem {
            source: s,
            target: Some(t),
            label: *y,
        })
        .collect();
    let records = accumulate(frozen, refocuser, &items, cfg, 1.0 / batch.len() as f64, None)?;
    Ok((LossBreakdown::from_records(&records, cfg)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn select_tokens_examples() {
        let s = Tensor::vector(vec![1.0, 2.0, -1.0]);
        let z = Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 1.0, 2.0, -1.0]).unwrap();
        let (m, zt) = select_tokens(&z, &s).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(zt.max_abs_diff(&z) < 1e-12);
        let z = Tensor::matrix(2, 3, vec![2.0, -1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (m, zt) = select_tokens(&z, &s).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(zt.data().iter().all(|&v| v.abs() < 1e-12));
        // zero token scores 0
        let z = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(select_tokens(&z, &s).unwrap().0.data(), &[0.0]);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_term(&[0.3; 4], &[-0.2; 4]), 0.0);
        assert!((variance_term(&[1.0, -1.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mask_bounded(seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let z = Tensor::randn(&mut r, &[5, 4], 3.0);
            let s = Tensor::randn(&mut r, &[4], 1.0);
            let (m, _) = select_tokens(&z, &s).unwrap();
            prop_assert!(m.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        }
    }

    fn hand_decoder() -> Decoder {
        let layer = |a: f64| DecoderLayer {
            ln_g: Tensor::vector(vec![1.0, 0.5]),
            ln_b: Tensor::vector(vec![0.1, -0.2]),
            w1: Tensor::matrix(2, 2, vec![a, -0.3, 0.2, 1.0]).unwrap(),
            b1: Tensor::vector(vec![0.05, 0.0]),
            w2: Tensor::matrix(2, 2, vec![0.4, 0.1, -0.6, a]).unwrap(),
            b2: Tensor::vector(vec![0.0, 0.3]),
        };
        Decoder {
            layers: vec![layer(0.7), layer(-1.1)],
            residual: true,
        }
    }

    #[test]
    fn decoder_matches_hand_trace() {
        let dec = hand_decoder();
        let zt = Tensor::matrix(2, 2, vec![0.5, -0.5, 2.0, 1.0]).unwrap();
        let e = decode_refocus(&zt, &dec).unwrap();

        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh());
        let mut x: [[f64; 2]; 2] = [[0.5, -0.5], [2.0, 1.0]];
        for (b, l) in dec.layers.iter().enumerate() {
            let mut next = [[0.0; 2]; 2];
            for r in 0..2 {
                let m = (x[r][0] + x[r][1]) / 2.0;
                let v = ((x[r][0] - m).powi(2) + (x[r][1] - m).powi(2)) / 2.0;
                let h: Vec<f64> = (0..2)
                    .map(|j| (x[r][j] - m) / (v + clip::LN_EPS).sqrt() * l.ln_g.data()[j] + l.ln_b.data()[j])
                    .collect();
                let a: Vec<f64> = (0..2)
                    .map(|j| gelu(h[0] * l.w1.get(&[0, j]) + h[1] * l.w1.get(&[1, j]) + l.b1.data()[j]))
                    .collect();
                for j in 0..2 {
                    next[r][j] = x[r][j] + a[0] * l.w2.get(&[0, j]) + a[1] * l.w2.get(&[1, j]) + l.b2.data()[j];
                }
            }
            x = next;
            for r in 0..2 {
                for j in 0..2 {
                    assert!((e.layers[b].get(&[r, j]) - x[r][j]).abs() < 1e-10);
                }
            }
        }
    }

    fn zero_output(cfg: &EncoderConfig) -> Refocuser {
        let mut r = Refocuser::init(cfg, 1);
        r.decoder.residual = false;
        for l in &mut r.decoder.layers {
            l.w2 = Tensor::zeros(l.w2.shape());
        }
        r
    }

    #[test]
    fn zero_decoder_reduces_to_plain_forward() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 2).unwrap();
        let r = zero_output(&cfg);
        let x = RasterImage::filled(8, 8, [0.2, 0.7, 0.4]);
        let zt = Tensor::randn(&mut rng::stream(3, &[]), &[5, 8], 1.0);
        let e = decode_refocus(&zt, &r.decoder).unwrap();
        assert!(e.layers.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let tp = two_pass_forward(&x, &bb, &r).unwrap();
        assert_eq!(tp.z_hat, bb.encode_image(&x, None).unwrap().embedding);
        assert_eq!(tp, two_pass_forward(&x, &bb, &r).unwrap());
    }

    #[test]
    fn layer_count_mismatch_is_config_error() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 2).unwrap();
        let mut r = Refocuser::init(&cfg, 1);
        r.decoder.layers.pop();
        let x = RasterImage::filled(8, 8, [0.5; 3]);
        assert!(matches!(two_pass_forward(&x, &bb, &r), Err(Error::Config(_))));
    }

    fn text(c: usize, d: usize) -> TextTable {
        let raw = Tensor::randn(&mut rng::stream(77, &[]), &[c, d], 1.0);
        TextTable::from_raw((0..c).map(|i| format!("k{i}")).collect(), &raw, 0.07).unwrap()
    }

    #[test]
    fn two_pass_gradient_check() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 5).unwrap();
        let t = text(3, 8);
        let mut r = Refocuser::init(&cfg, 6);
        r.sigma = Tensor::randn(&mut rng::stream(7, &[]), &[8], 1.0);
        let x = RasterImage::filled(8, 8, [0.1, 0.8, 0.3]);
        let prep = Prepared::new(&bb, &x).unwrap();
        let u = t.encode_text(1).unwrap();
        let params: Vec<Tensor> = std::iter::once(r.sigma.clone()).chain(r.decoder.to_flat()).collect();
        let report = grad_check(
            |g, v| {
                let bv = bb.bind(g, false);
                let rv = RefocuserVars {
                    sigma: v[0],
                    layers: v[1..].chunks(6).map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]]).collect(),
                    residual: true,
                };
                let p = g.constant(prep.patches.clone());
                let tk = g.constant(prep.tokens.clone());
                let tp = two_pass_graph(g, &cfg, &bv, &rv, p, tk)?;
                let uv = g.constant(u.clone());
                g.cosine(tp.z_hat, uv)
            },
            &params,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn uniform_predictor_gives_ln_c() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 5).unwrap();
        // identical class rows make every prediction uniform
        let raw = Tensor::ones(&[5, 8]);
        let t = TextTable::from_raw((0..5).map(|i| format!("k{i}")).collect(), &raw, 0.07).unwrap();
        let r = Refocuser::init(&cfg, 6);
        let frozen = Frozen { backbone: &bb, text: &t };
        let x = RasterImage::filled(8, 8, [0.3, 0.3, 0.9]);
        let lc = LossConfig {
            lambda: 0.1,
            disparity: DisparityMode::Maximize,
        };
        let (loss, _) = total_loss(
            frozen,
            &r,
            &[(&x, 2)],
            &AugmentationRanges::default(),
            &lc,
            &mut rng::stream(1, &[]),
        )
        .unwrap();
        assert!((loss.cls - 5f64.ln()).abs() < 1e-9);
        assert!((loss.align.unwrap() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_replays_from_records() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 8).unwrap();
        let t = text(3, 8);
        let r = Refocuser::init(&cfg, 9);
        let frozen = Frozen { backbone: &bb, text: &t };
        let a = RasterImage::filled(8, 8, [0.9, 0.1, 0.1]);
        let b = RasterImage::filled(8, 8, [0.1, 0.1, 0.9]);
        for disparity in [DisparityMode::Maximize, DisparityMode::Literal] {
            let lc = LossConfig { lambda: 0.1, disparity };
            let items_src = [Prepared::new(&bb, &a).unwrap(), Prepared::new(&bb, &b).unwrap()];
            let ranges = AugmentationRanges::default();
            let mut rr = rng::stream(4, &[]);
            let tgt: Vec<Prepared> = [&a, &b]
                .iter()
                .map(|x| Prepared::new(&bb, &simulate::simulate_target(x, &ranges, &mut rr).0).unwrap())
                .collect();
            let items = [
                LossItem { source: &items_src[0], target: Some(&tgt[0]), label: 0 },
                LossItem { source: &items_src[1], target: Some(&tgt[1]), label: 2 },
            ];
            let recs = accumulate(frozen, &r, &items, &lc, 0.5, None).unwrap();
            let lb = LossBreakdown::from_records(&recs, &lc).unwrap();
            let mut g = Graph::new();
            let rv = r.bind(&mut g, false);
            let node = total_loss_graph(&mut g, frozen, &rv, &items, &lc).unwrap();
            assert!((g.value(node).item() - lb.total).abs() < 1e-10);
            let decomposed = lb.cls + lb.align.unwrap() + disparity.sign() * 0.1 * lb.var;
            assert!((lb.total - decomposed).abs() < 1e-12);
        }
    }

    #[test]
    fn source_only_items_skip_alignment() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 8).unwrap();
        let t = text(3, 8);
        let r = Refocuser::init(&cfg, 9);
        let frozen = Frozen { backbone: &bb, text: &t };
        let p = Prepared::new(&bb, &RasterImage::filled(8, 8, [0.4, 0.5, 0.6])).unwrap();
        let lc = LossConfig {
            lambda: 0.1,
            disparity: DisparityMode::Maximize,
        };
        let recs = accumulate(
            frozen,
            &r,
            &[LossItem { source: &p, target: None, label: 1 }],
            &lc,
            1.0,
            None,
        )
        .unwrap();
        let lb = LossBreakdown::from_records(&recs, &lc).unwrap();
        assert!(lb.align.is_none());
        assert!((lb.var - variance_term(&recs[0].mask_source, &[0.0])).abs() < 1e-15);
    }
}
