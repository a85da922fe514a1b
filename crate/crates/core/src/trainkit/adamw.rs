//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::backbone::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at coordinate {coord}")]
    NonFiniteGrad { param: String, coord: usize },
    #[error("gradient count {grads} does not match parameter count {params}")]
    CountMismatch { grads: usize, params: usize },
    #[error("gradient for {param} has {got} values, expected {want}")]
    ShapeMismatch { param: String, got: usize, want: usize },
}

/// First/second moment accumulators, shaped like the parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub cfg: AdamWConfig,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &[ParamTensor<S>], cfg: AdamWConfig) -> Self {
        OptimizerState {
            cfg,
            m: params.iter().map(|p| vec![S::ZERO; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![S::ZERO; p.data.len()]).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update over every parameter:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step<S: Scalar>(
    params: &mut [ParamTensor<S>],
    grads: &[Vec<S>],
    opt: &mut OptimizerState<S>,
    lr_t: f64,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::CountMismatch { grads: grads.len(), params: params.len() });
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if g.len() != p.data.len() {
            return Err(OptimError::ShapeMismatch { param: p.name.clone(), got: g.len(), want: p.data.len() });
        }
        if let Some(coord) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad { param: p.name.clone(), coord });
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let beta1 = S::from_f64(opt.cfg.beta1);
    let beta2 = S::from_f64(opt.cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - opt.cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - opt.cfg.beta2);
    let bc1 = S::from_f64(1.0 - opt.cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - opt.cfg.beta2.powi(t));
    let eps = S::from_f64(opt.cfg.eps);
    let lr = S::from_f64(lr_t);
    let wd = S::from_f64(opt.cfg.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        let g = &grads[i];
        for j in 0..p.data.len() {
            m[j] = beta1 * m[j] + one_m_b1 * g[j];
            v[j] = beta2 * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = p.data[j];
            p.data[j] = old - lr * (m_hat / (v_hat.sqrt() + eps) + wd * old);
        }
    }
    Ok(())
}
