//! Miniature frozen dual encoder.
//!
//! The image side is a pre-LN vision transformer over non-overlapping
//! patches with a class token. Every attention layer accepts an optional
//! refocus bias that is added to the tensor the value projection reads;
//! queries and keys never see it. The text side is a per-class embedding
//! table keyed by the prompt string.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden width of the MLP block as a multiple of `width`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            layers: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return bad("layers and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Class token plus one token per patch.
    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Weights of one transformer block. Matrices are `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

const LAYER_FIELDS: [&str; 13] = [
    "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "b_o", "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2",
];

impl LayerParams {
    fn init(cfg: &EncoderConfig, rng: &mut rng::Stream) -> Self {
        let d = cfg.width;
        let h = cfg.hidden();
        let s_d = (1.0 / d as f64).sqrt();
        let s_h = (1.0 / h as f64).sqrt();
        Self {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            w_q: Tensor::randn(rng, &[d, d], s_d),
            w_k: Tensor::randn(rng, &[d, d], s_d),
            w_v: Tensor::randn(rng, &[d, d], s_d),
            w_o: Tensor::randn(rng, &[d, d], s_d * 0.5),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_fc1: Tensor::randn(rng, &[d, h], s_d),
            b_fc1: Tensor::zeros(&[h]),
            w_fc2: Tensor::randn(rng, &[h, d], s_h * 0.5),
            b_fc2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.b_o, &self.ln2_g,
            &self.ln2_b, &self.w_fc1, &self.b_fc1, &self.w_fc2, &self.b_fc2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        let [ln1_g, ln1_b, w_q, w_k, w_v, w_o, b_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2] =
            self.tensors().map(|t| g.leaf(t.clone(), trainable));
        LayerVars {
            ln1_g,
            ln1_b,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            ln2_g,
            ln2_b,
            w_fc1,
            b_fc1,
            w_fc2,
            b_fc2,
        }
    }
}

/// Graph handles of a bound [`LayerParams`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_fc1: Var,
    pub b_fc1: Var,
    pub w_fc2: Var,
    pub b_fc2: Var,
}

impl LayerVars {
    fn all(&self) -> [Var; 13] {
        [
            self.ln1_g, self.ln1_b, self.w_q, self.w_k, self.w_v, self.w_o, self.b_o, self.ln2_g, self.ln2_b,
            self.w_fc1, self.b_fc1, self.w_fc2, self.b_fc2,
        ]
    }
}

/// Per-layer refocus biases, one `L×d` tensor per encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RefocusParams {
    pub layers: Vec<Tensor>,
}

impl RefocusParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            layers: (0..cfg.layers).map(|_| Tensor::zeros(&[cfg.tokens(), cfg.width])).collect(),
        }
    }
}

pub fn check_refocus_shapes(cfg: &EncoderConfig, shapes: &[&[usize]]) -> Result<()> {
    if shapes.len() != cfg.layers {
        return Err(Error::RefocusShape(format!(
            "expected {} layers, got {}",
            cfg.layers,
            shapes.len()
        )));
    }
    let want = [cfg.tokens(), cfg.width];
    for (b, s) in shapes.iter().enumerate() {
        if *s != want {
            return Err(Error::RefocusShape(format!("layer {b}: expected {want:?}, got {s:?}")));
        }
    }
    Ok(())
}

/// The frozen image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub patch_w: Tensor,
    pub class_token: Tensor,
    pub pos: Tensor,
    pub ln_pre_g: Tensor,
    pub ln_pre_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_post_g: Tensor,
    pub ln_post_b: Tensor,
    pub proj: Tensor,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub class_token: Var,
    pub pos: Var,
    pub ln_pre_g: Var,
    pub ln_pre_b: Var,
    pub layers: Vec<LayerVars>,
    pub ln_post_g: Var,
    pub ln_post_b: Var,
    pub proj: Var,
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.class_token, self.pos, self.ln_pre_g, self.ln_pre_b];
        for l in &self.layers {
            v.extend(l.all());
        }
        v.extend([self.ln_post_g, self.ln_post_b, self.proj]);
        v
    }
}

/// Per-layer intermediate handles recorded during [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub q: Var,
    pub k: Var,
    /// Head-averaged attention weights, `L×L`.
    pub attn: Var,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Projected, normalized class token, `[d]`.
    pub embedding: Var,
    /// Final-layer token states after the output norm, `[L×d]`.
    pub tokens: Var,
    /// Class-token row of the last layer's head-averaged attention, `[L]`.
    pub last_attention: Var,
    pub trace: Vec<LayerTrace>,
}

/// Values of an [`EncodeOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub embedding: Tensor,
    pub tokens: Tensor,
    pub last_attention: Tensor,
}

impl Backbone {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT, 0xC11B]);
        let d = config.width;
        let layers = (0..config.layers).map(|_| LayerParams::init(&config, &mut rng)).collect();
        Ok(Self {
            config,
            patch_w: Tensor::randn(&mut rng, &[config.patch_dim(), d], (1.0 / config.patch_dim() as f64).sqrt()),
            class_token: Tensor::randn(&mut rng, &[d], 0.5),
            pos: Tensor::randn(&mut rng, &[config.tokens(), d], 0.2),
            ln_pre_g: Tensor::ones(&[d]),
            ln_pre_b: Tensor::zeros(&[d]),
            layers,
            ln_post_g: Tensor::ones(&[d]),
            ln_post_b: Tensor::zeros(&[d]),
            proj: Tensor::randn(&mut rng, &[d, d], (1.0 / d as f64).sqrt()),
        })
    }

    /// Parameters under stable checkpoint names, in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.patch_w".to_string(), &self.patch_w),
            ("backbone.class_token".to_string(), &self.class_token),
            ("backbone.pos".to_string(), &self.pos),
            ("backbone.ln_pre_g".to_string(), &self.ln_pre_g),
            ("backbone.ln_pre_b".to_string(), &self.ln_pre_b),
        ];
        for (b, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.tensors()) {
                out.push((format!("backbone.layer{b}.{name}"), t));
            }
        }
        out.push(("backbone.ln_post_g".into(), &self.ln_post_g));
        out.push(("backbone.ln_post_b".into(), &self.ln_post_b));
        out.push(("backbone.proj".into(), &self.proj));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.class_token,
            &mut self.pos,
            &mut self.ln_pre_g,
            &mut self.ln_pre_b,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.ln_post_g, &mut self.ln_post_b, &mut self.proj]);
        out
    }

    /// Rebuilds from named tensors; names must match [`Backbone::named`].
    pub fn from_named(config: EncoderConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut bb = Self::init(config, 0)?;
        let names: Vec<String> = bb.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(bb.tensors_mut()) {
            let t = get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(bb)
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        let patch_w = leaf(&self.patch_w);
        let class_token = leaf(&self.class_token);
        let pos = leaf(&self.pos);
        let ln_pre_g = leaf(&self.ln_pre_g);
        let ln_pre_b = leaf(&self.ln_pre_b);
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect();
        BackboneVars {
            patch_w,
            class_token,
            pos,
            ln_pre_g,
            ln_pre_b,
            layers,
            ln_post_g: g.leaf(self.ln_post_g.clone(), trainable),
            ln_post_b: g.leaf(self.ln_post_b.clone(), trainable),
            proj: g.leaf(self.proj.clone(), trainable),
        }
    }

    /// Graph-free convenience wrapper around [`encode`].
    pub fn encode_image(&self, x: &RasterImage, refocus: Option<&RefocusParams>) -> Result<Encoded> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let patches = g.constant(patchify(&self.config, x)?);
        let e: Option<Vec<Var>> = refocus.map(|r| r.layers.iter().map(|t| g.constant(t.clone())).collect());
        let out = encode(&mut g, &self.config, &vars, patches, e.as_deref())?;
        Ok(Encoded {
            embedding: g.value(out.embedding).clone(),
            tokens: g.value(out.tokens).clone(),
            last_attention: g.value(out.last_attention).clone(),
        })
    }
}

/// Cuts an image into row-major patches, each flattened channel-major.
/// Pixels are standardized per image: each channel loses its mean and all
/// channels share one scale, so a flat palette shift leaves the input
/// unchanged.
pub fn patchify(cfg: &EncoderConfig, x: &RasterImage) -> Result<Tensor> {
    if x.height() != cfg.image_size || x.width() != cfg.image_size {
        return Err(Error::Input(format!(
            "image is {}×{}, encoder expects {}×{}",
            x.height(),
            x.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let n = (cfg.image_size * cfg.image_size) as f64;
    let mut mean = [0.0; 3];
    for (c, m) in mean.iter_mut().enumerate() {
        for y in 0..cfg.image_size {
            for xx in 0..cfg.image_size {
                *m += x.get(c, y, xx);
            }
        }
        *m /= n;
    }
    let mut var = 0.0;
    for (c, m) in mean.iter().enumerate() {
        for y in 0..cfg.image_size {
            for xx in 0..cfg.image_size {
                var += (x.get(c, y, xx) - m).powi(2);
            }
        }
    }
    let inv = 1.0 / ((var / (3.0 * n)).sqrt() + PATCH_EPS);
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for gy in 0..cfg.grid() {
        for gx in 0..cfg.grid() {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        out.push((x.get(c, gy * p + py, gx * p + px) - mean[c]) * inv);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.patches(), cfg.patch_dim()], out)
}

const PATCH_EPS: f64 = 1e-2;

/// One pre-LN transformer block. The refocus bias `e_b`, when given, is
/// added to the normalized input before the value projection only.
pub fn attention_layer_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    x: Var,
    p: &LayerVars,
    e_b: Option<Var>,
) -> Result<(Var, LayerTrace)> {
    let h = g.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;
    let q = g.matmul(h, p.w_q)?;
    let k = g.matmul(h, p.w_k)?;
    let v_in = match e_b {
        Some(e) => g.add(h, e)?,
        None => h,
    };
    let v = g.matmul(v_in, p.w_v)?;

    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = g.slice_cols(q, head * dk, dk)?;
        let kh = g.slice_cols(k, head * dk, dk)?;
        let vh = g.slice_cols(v, head * dk, dk)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
        probs.push(a);
    }
    let attn_sum = g.add_all(&probs)?;
    let attn = g.scale(attn_sum, 1.0 / cfg.heads as f64);
    let o = g.concat_cols(&heads)?;
    let o = g.matmul(o, p.w_o)?;
    let o = g.add_row(o, p.b_o)?;
    let x = g.add(x, o)?;

    let h2 = g.layer_norm(x, p.ln2_g, p.ln2_b, LN_EPS)?;
    let m = g.matmul(h2, p.w_fc1)?;
    let m = g.add_row(m, p.b_fc1)?;
    let m = g.gelu(m);
    let m = g.matmul(m, p.w_fc2)?;
    let m = g.add_row(m, p.b_fc2)?;
    let out = g.add(x, m)?;
    Ok((out, LayerTrace { q, k, attn }))
}

/// Full image-encoder forward on a `[patches × patch_dim]` input.
pub fn encode(
    g: &mut Graph,
    cfg: &EncoderConfig,
    vars: &BackboneVars,
    patches: Var,
    refocus: Option<&[Var]>,
) -> Result<EncodeOutput> {
    if let Some(e) = refocus {
        let shapes: Vec<Vec<usize>> = e.iter().map(|&v| g.shape(v).to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        check_refocus_shapes(cfg, &refs)?;
    }
    let emb = g.matmul(patches, vars.patch_w)?;
    let x = g.concat_rows(&[vars.class_token, emb])?;
    let x = g.add(x, vars.pos)?;
    let mut x = g.layer_norm(x, vars.ln_pre_g, vars.ln_pre_b, LN_EPS)?;
    let mut trace = Vec::with_capacity(cfg.layers);
    for (b, lp) in vars.layers.iter().enumerate() {
        let (next, t) = attention_layer_forward(g, cfg, x, lp, refocus.map(|e| e[b]))?;
        x = next;
        trace.push(t);
    }
    let tokens = g.layer_norm(x, vars.ln_post_g, vars.ln_post_b, LN_EPS)?;
    let cls = g.gather_rows(tokens, &[0])?;
    let emb = g.matmul(cls, vars.proj)?;
    let embedding = g.reshape(emb, &[cfg.width])?;
    let last = trace.last().expect("at least one layer").attn;
    let last_attention = g.row(last, 0)?;
    Ok(EncodeOutput {
        embedding,
        tokens,
        last_attention,
        trace,
    })
}

/// Frozen per-class text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTable {
    pub class_names: Vec<String>,
    /// Unit-norm rows, `C×d`.
    pub embeddings: Tensor,
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 0.07;

pub fn prompt(class_name: &str) -> String {
    format!("a photo of a {class_name}")
}

impl TextTable {
    /// Unnormalized starting rows derived from each prompt string.
    fn init_raw(class_names: &[String], width: usize, seed: u64) -> Tensor {
        let mut data = Vec::with_capacity(class_names.len() * width);
        for name in class_names {
            let key = prompt(name)
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            let mut r = rng::stream(seed, &[tag::INIT, key]);
            data.extend(Tensor::randn(&mut r, &[width], 1.0).into_data());
        }
        Tensor::matrix(class_names.len(), width, data).expect("sized above")
    }

    pub fn from_raw(class_names: Vec<String>, raw: &Tensor, tau: f64) -> Result<Self> {
        let mut emb = raw.clone();
        let d = raw.cols();
        for r in 0..raw.rows() {
            let row = &mut emb.data_mut()[r * d..(r + 1) * d];
            let n = crate::tensor::dot(row, row).sqrt();
            if n < crate::tensor::NORM_FLOOR {
                return Err(Error::DegenerateEmbedding);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            class_names,
            embeddings: emb,
            tau,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn prompt(&self, class_id: usize) -> Result<String> {
        self.class_names
            .get(class_id)
            .map(|n| prompt(n))
            .ok_or(Error::UnknownLabel(class_id))
    }

    pub fn encode_text(&self, class_id: usize) -> Result<Tensor> {
        if class_id >= self.classes() {
            return Err(Error::UnknownLabel(class_id));
        }
        Ok(Tensor::vector(self.embeddings.row(class_id).to_vec()))
    }

    /// Class probabilities for an embedding node `[d]`, as a `[C]` node.
    pub fn probs_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let d = self.width();
        let z = g.reshape(z, &[1, d])?;
        let zn = g.normalize_rows(z)?;
        let ut = g.constant(self.embeddings.transpose()?);
        let cos = g.matmul(zn, ut)?;
        let logits = g.scale(cos, 1.0 / self.tau);
        let logits = g.reshape(logits, &[self.classes()])?;
        g.softmax(logits, 0)
    }

    pub fn predict_probs(&self, z: &Tensor) -> Result<Vec<f64>> {
        if !z.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = self.probs_graph(&mut g, zv)?;
        Ok(g.value(p).data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Contrastive pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub steps: usize,
    /// Rounded down to whole blocks of one image per class.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub init_logit_scale: f64,
    /// Upper bound on the learned logit scale.
    pub max_logit_scale: f64,
    /// Learning-rate multiplier for the log logit scale.
    pub scale_lr_mult: f64,
    pub tau: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            steps: 1200,
            batch_size: 30,
            lr: 5e-4,
            weight_decay: 0.01,
            init_logit_scale: 10.0,
            max_logit_scale: 1.0 / DEFAULT_TAU,
            scale_lr_mult: 10.0,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: RasterImage,
    pub label: usize,
}

/// Per-step pretraining record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PretrainStep {
    pub step: usize,
    pub loss: f64,
    pub logit_scale: f64,
}

/// Symmetric InfoNCE over matched rows of `img[n×d]` and `txt[n×d]`.
pub fn info_nce(g: &mut Graph, img: Var, txt: Var, logit_scale: Var) -> Result<Var> {
    let n = g.shape(img)[0];
    let i = g.normalize_rows(img)?;
    let t = g.normalize_rows(txt)?;
    let tt = g.transpose(t)?;
    let logits = g.matmul(i, tt)?;
    let logits = g.scale_by(logits, logit_scale)?;
    let diag: Vec<usize> = (0..n).collect();
    let li = g.log_softmax(logits, 1)?;
    let lt = g.log_softmax(logits, 0)?;
    let pi = g.pick_rows(li, &diag)?;
    let pt = g.pick_rows(lt, &diag)?;
    let both = g.add(pi, pt)?;
    let m = g.mean(both);
    Ok(g.scale(m, -0.5))
}

/// Trains backbone and text table jointly, then returns them frozen.
pub fn pretrain_contrastive(
    corpus: &[LabeledImage],
    class_names: &[String],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(PretrainStep),
) -> Result<(Backbone, TextTable)> {
    if class_names.len() < 2 {
        return Err(Error::Coverage("need at least two classes".into()));
    }
    for c in 0..class_names.len() {
        if !corpus.iter().any(|s| s.label == c) {
            return Err(Error::Coverage(format!("no images of class {}", class_names[c])));
        }
    }
    if let Some(s) = corpus.iter().find(|s| s.label >= class_names.len()) {
        return Err(Error::UnknownLabel(s.label));
    }
    let ecfg = cfg.encoder;
    let mut backbone = Backbone::init(ecfg, seed)?;
    let mut text_raw = TextTable::init_raw(class_names, ecfg.width, seed);
    let mut log_scale = Tensor::scalar(cfg.init_logit_scale.ln());
    let patches: Vec<Tensor> = corpus
        .iter()
        .map(|s| patchify(&ecfg, &s.image))
        .collect::<Result<_>>()?;

    let shapes: Vec<Vec<usize>> = backbone
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .chain([text_raw.shape().to_vec(), vec![1]])
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &shape_refs,
        false,
    );
    let mut lrs = vec![cfg.lr; shapes.len()];
    *lrs.last_mut().expect("scale slot") *= cfg.scale_lr_mult;

    // Batches are blocks in which every class appears once, so no in-batch
    // negative shares the positive's class.
    let classes = class_names.len();
    let mut queues: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..corpus.len()).filter(|&i| corpus[i].label == c).collect())
        .collect();
    let mut cursors = vec![usize::MAX; classes];
    let mut shuffle_rng = rng::stream(seed, &[tag::PRETRAIN]);
    let blocks = (cfg.batch_size / classes).max(1);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g, true);
        let text = g.param(text_raw.clone());
        let scale_log = g.param(log_scale.clone());
        let scale = g.exp(scale_log);
        let mut block_losses = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let mut labels: Vec<usize> = (0..classes).collect();
            labels.shuffle(&mut shuffle_rng);
            let mut embs = Vec::with_capacity(classes);
            for &c in &labels {
                if cursors[c] >= queues[c].len() {
                    queues[c].shuffle(&mut shuffle_rng);
                    cursors[c] = 0;
                }
                let i = queues[c][cursors[c]];
                cursors[c] += 1;
                let p = g.constant(patches[i].clone());
                embs.push(encode(&mut g, &ecfg, &vars, p, None)?.embedding);
            }
            let img = g.concat_rows(&embs)?;
            let txt = g.gather_rows(text, &labels)?;
            block_losses.push(info_nce(&mut g, img, txt, scale)?);
        }
        let mut loss = block_losses[0];
        for &l in &block_losses[1..] {
            loss = g.add(loss, l)?;
        }
        let loss = g.scale(loss, 1.0 / blocks as f64);
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .all()
            .iter()
            .chain([&text, &scale_log])
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite("pretraining gradient"));
        }
        {
            let mut params = backbone.tensors_mut();
            params.push(&mut text_raw);
            params.push(&mut log_scale);
            opt.step(&mut params, &grads, &lrs);
        }
        grads.clear();
        let cap = cfg.max_logit_scale.ln();
        if log_scale.item() > cap {
            log_scale.data_mut()[0] = cap;
        }
        on_step(PretrainStep {
            step,
            loss: loss_value,
            logit_scale: log_scale.item().exp(),
        });
    }
    // frozen weights live in f32 so checkpoints reload them exactly
    backbone.round_to_f32();
    let mut table = TextTable::from_raw(class_names.to_vec(), &text_raw, cfg.tau)?;
    table.embeddings.round_to_f32();
    Ok((backbone, table))
}

/// Zero-shot top-1 accuracy of a frozen pair on labeled images.
pub fn zero_shot_accuracy(backbone: &Backbone, text: &TextTable, samples: &[LabeledImage]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        let enc = backbone.encode_image(&s.image, None)?;
        let probs = text.predict_probs(&enc.embedding)?;
        if argmax(&probs) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
