//! Momentum, RMSProp and Adam with L2 regularization folded into the gradient.

use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    Momentum,
    RMSProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Momentum, OptimizerKind::RMSProp, OptimizerKind::Adam];
}

pub const MOMENTUM: f64 = 0.9;
pub const RMSPROP_DECAY: f64 = 0.99;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter accumulators for one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub step: u64,
    /// Velocity (Momentum), squared-gradient average (RMSProp) or first moment (Adam).
    first: Vec<f64>,
    /// Second moment (Adam only).
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, l2_lambda: f64, n_params: usize) -> Self {
        let second = if kind == OptimizerKind::Adam { vec![0.0; n_params] } else { Vec::new() };
        Self { kind, learning_rate, l2_lambda, step: 0, first: vec![0.0; n_params], second }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Applies one update in place. `grads` is the loss gradient without the
    /// L2 term; `λ·w` is added here.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.first.len(), "optimizer state does not match parameter count");
        assert_eq!(grads.len(), params.len(), "gradient does not match parameter count");
        self.step += 1;
        let lr = self.learning_rate;
        let lambda = self.l2_lambda;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let wf = w.to_f64();
                    let g = g.to_f64() + lambda * wf;
                    *v = MOMENTUM * *v + g;
                    *w = T::from_f64(wf - lr * *v);
                }
            }
            OptimizerKind::RMSProp => {
                for ((w, g), s) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let wf = w.to_f64();
                    let g = g.to_f64() + lambda * wf;
                    *s = RMSPROP_DECAY * *s + (1.0 - RMSPROP_DECAY) * g * g;
                    *w = T::from_f64(wf - lr * g / (s.sqrt() + EPSILON));
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let wf = w.to_f64();
                    let g = g.to_f64() + lambda * wf;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w = T::from_f64(wf - lr * m_hat / (v_hat.sqrt() + EPSILON));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![0.5f64, -1.25, 3.0];
        let before = p.clone();
        let mut s = OptimizerState::new(OptimizerKind::Momentum, 0.1, 0.0, 3);
        s.step(&mut p, &[0.0; 3]);
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected m̂ = 1, v̂ = 1 -> Δw = -0.1 / (1 + 1e-8)
        let mut p = vec![0.0f64];
        let mut s = OptimizerState::new(OptimizerKind::Adam, 0.1, 0.0, 1);
        s.step(&mut p, &[1.0]);
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn momentum_and_rmsprop_hand_traces() {
        let mut p = vec![1.0f64];
        let mut s = OptimizerState::new(OptimizerKind::Momentum, 0.1, 0.0, 1);
        s.step(&mut p, &[1.0]); // v = 1, w = 0.9
        s.step(&mut p, &[1.0]); // v = 1.9, w = 0.71
        assert!((p[0] - 0.71).abs() < 1e-12);

        let mut p = vec![0.0f64];
        let mut s = OptimizerState::new(OptimizerKind::RMSProp, 0.01, 0.0, 1);
        s.step(&mut p, &[2.0]); // s = 0.04, step = 0.01 * 2 / 0.2 = 0.1
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn l2_term_is_added_to_gradient() {
        let mut a = vec![2.0f64];
        let mut b = vec![2.0f64];
        let mut sa = OptimizerState::new(OptimizerKind::Momentum, 0.1, 0.5, 1);
        let mut sb = OptimizerState::new(OptimizerKind::Momentum, 0.1, 0.0, 1);
        sa.step(&mut a, &[0.0]);
        sb.step(&mut b, &[1.0]); // λ·w = 1
        assert_eq!(a, b);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        for kind in OptimizerKind::ALL {
            let run = || {
                let mut p = vec![0.3f32, -0.2, 0.9];
                let mut s = OptimizerState::new(kind, 0.01, 1e-3, 3);
                for k in 0..20 {
                    let g: Vec<f32> = p.iter().map(|w| w * 2.0 + k as f32 * 0.01).collect();
                    s.step(&mut p, &g);
                }
                p
            };
            assert_eq!(run(), run());
        }
    }
}
