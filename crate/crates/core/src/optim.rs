//! AdamW with decoupled weight decay, global-norm clipping, and a
//! warmup + cosine learning-rate schedule.

use crate::config::TrainConfig;
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// First moments, shaped like their parameters.
    pub m: Vec<Tensor>,
    /// Second moments, shaped like their parameters.
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        OptimizerState {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// Linear warmup from 0 (at `iter = 0`) to `learning_rate` (at
/// `warmup_iters`), then cosine decay to `min_lr` at `max_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.learning_rate * iter as f64 / cfg.warmup_iters as f64;
    }
    if iter >= cfg.max_iters {
        return cfg.min_lr;
    }
    let span = (cfg.max_iters - cfg.warmup_iters) as f64;
    let ratio = (iter - cfg.warmup_iters) as f64 / span;
    let coeff = 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos());
    cfg.min_lr + coeff * (cfg.learning_rate - cfg.min_lr)
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// One AdamW update. Weight decay applies to matrices only (embeddings and
/// projections), never to layer-norm gains or biases.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(LabError::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(LabError::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
