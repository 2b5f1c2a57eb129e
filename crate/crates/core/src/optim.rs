//! AdamW with per-parameter learning rates.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    /// Round parameters and moments to f32 after each step.
    single_precision: bool,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[&[usize]], single_precision: bool) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            single_precision,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `params`, `grads` and `lrs` are parallel slices.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lrs.len(), self.m.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for k in 0..pd.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                pd[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[k]);
            }
            if self.single_precision {
                p.round_to_f32();
                self.m[i].round_to_f32();
                self.v[i].round_to_f32();
            }
        }
    }
}
