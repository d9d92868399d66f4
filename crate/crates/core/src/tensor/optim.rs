//! Adam with decoupled weight decay and the warmup / inverse-square-root schedule.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamState {
    /// Zeroed moments for parameters with the given element counts.
    pub fn new(sizes: &[usize], lr: f32, weight_decay: f32) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update with bias correction, followed by `p -= lr * wd * p`.
/// A parameter without a gradient buffer is treated as having a zero gradient.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::dim(
            "params",
            format!("{} parameters vs {} optimizer slots", params.len(), state.m.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(Error::dim(
                "params",
                format!("parameter {i} has {} elements, optimizer slot {}", p.numel(), state.m[i].len()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (b1, b2, lr, eps, wd) = (state.beta1, state.beta2, state.lr, state.eps, state.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(|g| g.to_vec());
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = (m[j] as f64 / bc1) as f32;
            let vhat = (v[j] as f64 / bc2) as f32;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
            data[j] -= lr * wd * data[j];
        }
    }
    Ok(())
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then `peak * sqrt(warmup / step)`.
pub fn lr_at(step: u64, peak_lr: f32, warmup_steps: u64) -> f32 {
    let warmup = warmup_steps.max(1);
    if step <= warmup {
        (peak_lr as f64 * step as f64 / warmup as f64) as f32
    } else {
        (peak_lr as f64 * (warmup as f64 / step as f64).sqrt()) as f32
    }
}
