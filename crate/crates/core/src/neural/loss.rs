//! Lopsided bootstrap loss.
//!
//! Per pixel, with `p` the softmax output:
//!
//! * label 1: `α · CE(1, p)`
//! * label 0: `β · CE(0, p) + (1 − β) · CE(argmax p, p)`
//!
//! where `CE(c, p) = −ln max(p_c, ε)`. The argmax is treated as a constant
//! and ties go to class 0. The result is the mean over pixels.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking the log.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Positive-label weight, > 1.
    pub alpha: f64,
    /// Share of the label term on negatives, in (0, 1]; 1 is plain cross entropy.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 4.0, beta: 0.8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Gradient with respect to the logits, laid out like the probabilities.
    pub grad_logits: Vec<T>,
}

/// Two-class softmax over the channel axis of a `(2, H, W)` tensor.
pub fn softmax2<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    assert_eq!(logits.c, 2, "softmax2 expects two channels");
    let n = logits.plane();
    let mut out = Tensor::zeros(2, logits.h, logits.w);
    for i in 0..n {
        let z0 = logits.data[i].to_f64();
        let z1 = logits.data[n + i].to_f64();
        // p1 = σ(z1 − z0), computed without overflow
        let d = z1 - z0;
        let p1 = if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            let e = d.exp();
            e / (1.0 + e)
        };
        out.data[i] = T::from_f64(1.0 - p1);
        out.data[n + i] = T::from_f64(p1);
    }
    out
}

/// Loss and logit gradient for channel-major probabilities `[p0.., p1..]`
/// and per-pixel labels in {0, 1}.
pub fn lopsided_loss<T: Real>(probs: &[T], labels: &[u8], cfg: &LossConfig) -> LossOutput<T> {
    let n = labels.len();
    assert_eq!(probs.len(), 2 * n, "probabilities must be (2, N)");
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![T::ZERO; 2 * n];
    for (i, &y) in labels.iter().enumerate() {
        let p = [probs[i].to_f64(), probs[n + i].to_f64()];
        // d(−ln p_c)/dz = p − e_c while p_c is above the clamp, else 0
        let mut g = [0.0f64; 2];
        let term = |class: usize, weight: f64, g: &mut [f64; 2]| -> f64 {
            let pc = p[class];
            if pc >= LOG_EPS {
                g[0] += weight * (p[0] - (class == 0) as u8 as f64);
                g[1] += weight * (p[1] - (class == 1) as u8 as f64);
                -weight * pc.ln()
            } else {
                -weight * LOG_EPS.ln()
            }
        };
        loss += if y != 0 {
            term(1, cfg.alpha, &mut g)
        } else {
            let argmax = if p[1] > p[0] { 1 } else { 0 };
            term(0, cfg.beta, &mut g) + term(argmax, 1.0 - cfg.beta, &mut g)
        };
        grad[i] = T::from_f64(g[0] * inv_n);
        grad[n + i] = T::from_f64(g[1] * inv_n);
    }
    LossOutput { loss: loss * inv_n, grad_logits: grad }
}
