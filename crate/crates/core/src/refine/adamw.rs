use serde::{Deserialize, Serialize};

use crate::mask::LossKind;
use crate::scalar::Real;

use super::RefineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Loss change below which a step counts toward convergence.
    pub converge_tol: f64,
    pub converge_patience: usize,
    /// Also move the flipped pathology points.
    pub optimize_anchors: bool,
    pub loss: LossKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_steps: 100,
            converge_tol: 1e-5,
            converge_patience: 5,
            optimize_anchors: false,
            loss: LossKind::FullBce,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        if self.converge_tol.is_nan() || self.converge_tol < 0.0 {
            return Err(format!(
                "converge_tol must be nonnegative, got {}",
                self.converge_tol
            ));
        }
        Ok(())
    }

    /// Consecutive small-change steps required to stop. An infinite
    /// tolerance stops after the first step.
    pub fn effective_patience(&self) -> usize {
        if self.converge_tol.is_finite() {
            self.converge_patience.max(1)
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T = f64> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay, then
/// a clamp of every coordinate into `[lo, hi]`.
pub fn adamw_step<T: Real>(
    state: &mut AdamWState<T>,
    coords: &mut [T],
    grads: &[T],
    cfg: &OptimizerConfig,
    lo: T,
    hi: T,
) -> Result<(), RefineError> {
    if coords.len() != grads.len() || state.m.len() != coords.len() || state.v.len() != coords.len()
    {
        return Err(RefineError::LengthMismatch {
            coords: coords.len(),
            grads: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(RefineError::NonFiniteGradient {
            step: state.t as usize + 1,
            index,
        });
    }
    state.t += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    let t = state.t as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for i in 0..coords.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let x = coords[i];
        let next = x - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * x;
        coords[i] = next.max(lo).min(hi);
    }
    Ok(())
}
