//! The composed objective over a batch of original / transformed pairs, with
//! exact gradients with respect to the query-encoder parameters and both input
//! embedding batches. Keys and bank contents enter as constants.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    cross_entropy, cross_entropy_grad, info_nce_with_grad, js_div, js_div_grad, softmax_backward,
    total_objective, Divergence, LossBreakdown, LossParts, LossWeights,
};
use crate::encoder::{
    backward, forward, project, softmax_rows, Dropout, DropoutMasks, EmbeddingBatch, ModelParams,
    Projection, Upstream,
};
use crate::error::{CodaError, Result};
use crate::rng::CodaRng;
use crate::tensor::Matrix;

/// Which term fills the α-weighted slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvTerm {
    /// Labeled cross-entropy at the transformed input.
    #[default]
    At,
    /// Label-free consistency between perturbed and original predictions.
    Vat,
}

/// Branch of the consistency term whose gradient is stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopGrad {
    #[default]
    None,
    Original,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub tau: f64,
    pub adv_term: AdvTerm,
    pub divergence: Divergence,
    pub stop_grad: StopGrad,
}

pub struct ObjectiveInputs<'a> {
    pub original: &'a EmbeddingBatch,
    pub augmented: &'a EmbeddingBatch,
    pub labels: &'a [Vec<f64>],
    /// Labels of the transformed examples (interpolated under mixup).
    pub aug_labels: &'a [Vec<f64>],
    /// Dropout masks shared by both forwards; `None` runs both in eval mode.
    pub masks: Option<&'a Arc<DropoutMasks>>,
    /// Momentum-encoder keys for the original examples.
    pub keys: &'a Projection,
    /// Flat bank snapshot, `n × d_proj`.
    pub bank: &'a [f64],
    /// Per example: whether the transformed query joins the contrastive term.
    pub aug_in_contrast: &'a [bool],
    pub settings: ObjectiveSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub params: ModelParams,
    pub original_input: Vec<f64>,
    pub augmented_input: Vec<f64>,
    /// Dropout masks seen by the original and transformed forwards.
    pub masks: [Option<Arc<DropoutMasks>>; 2],
}

fn dropout_for(masks: Option<&Arc<DropoutMasks>>) -> Dropout<'static, CodaRng> {
    match masks {
        Some(m) => Dropout::reuse(m),
        None => Dropout::off(),
    }
}

/// Evaluates the batch-mean objective and, if `with_grad`, its gradients.
pub fn evaluate_objective(
    params: &ModelParams,
    inputs: &ObjectiveInputs<'_>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ObjectiveGrads>)> {
    let b = inputs.original.batch;
    if inputs.augmented.batch != b
        || inputs.labels.len() != b
        || inputs.aug_labels.len() != b
        || inputs.keys.unit.rows != b
        || inputs.aug_in_contrast.len() != b
    {
        return Err(CodaError::Shape(format!(
            "objective inputs disagree on batch size {b}"
        )));
    }
    if b == 0 {
        return Err(CodaError::Shape("empty batch".into()));
    }
    let s = inputs.settings;
    let w = s.weights;

    let orig = forward(params, inputs.original, dropout_for(inputs.masks))?;
    let aug = forward(params, inputs.augmented, dropout_for(inputs.masks))?;
    let p = softmax_rows(&orig.logits);
    let p_hat = softmax_rows(&aug.logits);
    let q = project(params, &orig.pooled);
    let q_aug = project(params, &aug.pooled);

    let c = p.cols;
    let inv_b = 1.0 / b as f64;
    let mut dp = Matrix::zeros(b, c);
    let mut dp_hat = Matrix::zeros(b, c);
    let mut parts = LossParts::default();

    for i in 0..b {
        let (pi, phi) = (p.row(i), p_hat.row(i));
        let (y, y_hat) = (&inputs.labels[i], &inputs.aug_labels[i]);

        parts.ce += cross_entropy(pi, y) * inv_b;
        add_scaled(dp.row_mut(i), &cross_entropy_grad(pi, y), inv_b);

        match s.adv_term {
            AdvTerm::At => {
                parts.adv_ce += cross_entropy(phi, y_hat) * inv_b;
                add_scaled(dp_hat.row_mut(i), &cross_entropy_grad(phi, y_hat), w.alpha * inv_b);
            }
            AdvTerm::Vat => {
                parts.adv_ce += js_div(phi, pi) * inv_b;
                let (d_pert, d_orig) = js_div_grad(phi, pi);
                add_scaled(dp_hat.row_mut(i), &d_pert, w.alpha * inv_b);
                add_scaled(dp.row_mut(i), &d_orig, w.alpha * inv_b);
            }
        }

        parts.consistency += s.divergence.eval(pi, phi) * inv_b;
        let (d_orig, d_aug) = s.divergence.grad(pi, phi);
        if s.stop_grad != StopGrad::Original {
            add_scaled(dp.row_mut(i), &d_orig, w.beta * inv_b);
        }
        if s.stop_grad != StopGrad::Augmented {
            add_scaled(dp_hat.row_mut(i), &d_aug, w.beta * inv_b);
        }
    }

    let d_proj = q.unit.cols;
    let mut dq = Matrix::zeros(b, d_proj);
    let mut dq_aug = Matrix::zeros(b, d_proj);
    let keys = inputs.keys;
    let self_rows: Vec<usize> = (0..b)
        .filter(|&i| !keys.flagged[i] && !q.flagged[i])
        .collect();
    let aug_rows: Vec<usize> = (0..b)
        .filter(|&i| !keys.flagged[i] && !q_aug.flagged[i] && inputs.aug_in_contrast[i])
        .collect();
    for (rows, proj, grad, slot) in [
        (&self_rows, &q, &mut dq, &mut parts.contrast_self),
        (&aug_rows, &q_aug, &mut dq_aug, &mut parts.contrast_aug),
    ] {
        if rows.is_empty() {
            continue;
        }
        let scale = 1.0 / rows.len() as f64;
        for &i in rows.iter() {
            let (l, g) = info_nce_with_grad(proj.unit.row(i), keys.unit.row(i), inputs.bank, s.tau)?;
            *slot += l * scale;
            add_scaled(grad.row_mut(i), &g, w.lambda * scale);
        }
    }

    let breakdown = total_objective(parts, w);
    if !with_grad {
        return Ok((breakdown, None));
    }

    let mut dlogits = Matrix::zeros(b, c);
    let mut dlogits_hat = Matrix::zeros(b, c);
    for i in 0..b {
        dlogits.row_mut(i).copy_from_slice(&softmax_backward(p.row(i), dp.row(i)));
        dlogits_hat
            .row_mut(i)
            .copy_from_slice(&softmax_backward(p_hat.row(i), dp_hat.row(i)));
    }
    let g_orig = backward(
        params,
        &orig.cache,
        Upstream {
            logits: Some(&dlogits),
            projection: Some((&q, &dq)),
        },
    )?;
    let g_aug = backward(
        params,
        &aug.cache,
        Upstream {
            logits: Some(&dlogits_hat),
            projection: Some((&q_aug, &dq_aug)),
        },
    )?;
    let mut grads = g_orig.params;
    grads.add_assign(&g_aug.params);
    Ok((
        breakdown,
        Some(ObjectiveGrads {
            params: grads,
            original_input: g_orig.input_grad,
            augmented_input: g_aug.input_grad,
            masks: [orig.cache.masks().cloned(), aug.cache.masks().cloned()],
        }),
    ))
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    if s == 0.0 {
        return;
    }
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
