use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::encoder::ModelParams;
use crate::error::{CodaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)`. The PAD embedding row never changes.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    hyper: AdamHyper,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(CodaError::Config("adam step counter starts at 1".into()));
    }
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(CodaError::Shape("parameter, gradient and optimizer shapes differ".into()));
    }
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = hyper;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    let d_emb = params.embed.cols;
    let pad = PAD as usize * d_emb..(PAD as usize + 1) * d_emb;

    let p_iter = params.tensors_mut().into_iter();
    let g_iter = grads.tensors().into_iter();
    let m_iter = state.m.tensors_mut().into_iter();
    let v_iter = state.v.tensors_mut().into_iter();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in p_iter.zip(g_iter).zip(m_iter).zip(v_iter) {
        for k in 0..p.data.len() {
            if name == "embed" && pad.contains(&k) {
                continue;
            }
            let gk = g.data[k];
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m.data[k] / c1;
            let v_hat = v.data[k] / c2;
            p.data[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p.data[k]);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_steps`, then linear decay to 0 at `total_steps`.
pub fn scheduled_lr(base: f64, step: u64, warmup_steps: u64, total_steps: u64) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base;
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    base * remaining / (total_steps - warmup_steps) as f64
}
