//! Refined attention maps, cross-domain attention consistency and the
//! similarity-gated exponential parameter ensemble.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refocus::Decoder;
use crate::tensor::{cosine_similarity, Cosine, Tensor};

/// Update ratio ω.
pub const DEFAULT_OMEGA: f64 = 0.98;

/// `Â = A ⊙ M`.
pub fn refine_attention(a: &[f64], m: &[f64]) -> Result<Vec<f64>> {
    if a.len() != m.len() {
        return Err(Error::dim("refine_attention", &[a.len()], &[m.len()]));
    }
    Ok(a.iter().zip(m).map(|(x, y)| x * y).collect())
}

/// Cosine between source and target refined maps; zero-norm maps give 0
/// with the degenerate flag set.
pub fn attention_consistency(src: &[f64], tgt: &[f64]) -> Result<Cosine> {
    cosine_similarity(src, tgt)
}

pub fn batch_consistency(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Contract("batch consistency of an empty batch".into()));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Accept only when `s_t > s̄`.
    #[default]
    Gated,
    /// Accept every step (plain EMA).
    AlwaysOpen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub s_bar: f64,
    /// Ensembled decoder tensors θ_a, in [`Decoder::tensors`] order.
    pub theta_a: Vec<Tensor>,
    pub omega: f64,
    pub accept_count: u64,
}

/// Outcome of one [`EnsembleState::maybe_ensemble`] call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub s_t: f64,
    pub s_bar_before: f64,
    pub s_bar_after: f64,
    pub accepted: bool,
}

impl EnsembleState {
    /// `s̄ = 0`, `θ_a = 0`.
    pub fn new(shapes: &[Vec<usize>], omega: f64) -> Self {
        Self {
            s_bar: 0.0,
            theta_a: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            omega,
            accept_count: 0,
        }
    }

    pub fn for_decoder(decoder: &Decoder, omega: f64) -> Self {
        let shapes: Vec<Vec<usize>> = decoder.tensors().iter().map(|t| t.shape().to_vec()).collect();
        Self::new(&shapes, omega)
    }

    pub fn maybe_ensemble(&mut self, theta_t: &[&Tensor], s_t: f64, gate: GateMode) -> Result<Acceptance> {
        if theta_t.len() != self.theta_a.len() {
            return Err(Error::Contract(format!(
                "ensemble holds {} tensors, got {}",
                self.theta_a.len(),
                theta_t.len()
            )));
        }
        for (a, t) in self.theta_a.iter().zip(theta_t) {
            if a.shape() != t.shape() {
                return Err(Error::dim("maybe_ensemble", a.shape(), t.shape()));
            }
        }
        let before = self.s_bar;
        let accepted = match gate {
            GateMode::Gated => s_t > self.s_bar,
            GateMode::AlwaysOpen => true,
        };
        if accepted {
            let w = self.omega;
            for (a, t) in self.theta_a.iter_mut().zip(theta_t) {
                for (x, &y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x = w * *x + (1.0 - w) * y;
                }
            }
            self.s_bar = w * self.s_bar + (1.0 - w) * s_t;
            self.accept_count += 1;
        }
        Ok(Acceptance {
            s_t,
            s_bar_before: before,
            s_bar_after: self.s_bar,
            accepted,
        })
    }

    /// Decoder used at inference: θ_a, or `trained` when nothing was ever
    /// accepted.
    pub fn inference_decoder(&self, trained: &Decoder) -> Result<Decoder> {
        if self.accept_count == 0 {
            log::warn!("no step passed the ensemble gate; falling back to the trained decoder");
            return Ok(trained.clone());
        }
        trained.with_flat(&self.theta_a)
    }
}
