//! Central finite-difference check of the full training objective.
//!
//! A case draws a small model, a batch of token sequences, a strategy, loss
//! weights and contrastive constants from one seed; the analytic gradient with
//! respect to every parameter tensor and both input batches is then compared
//! against `(f(x+h) − f(x−h)) / 2h` coordinate by coordinate.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::augment::{apply_strategy, AugmentContext, AugmentSettings, CrossEntropyOracle, StrategySpec, UnigramSampler};
use crate::corpus::{build_vocab_from_texts, tokenize, LabeledExample, ParaphraseTable, TokenSequence, Vocabulary};
use crate::encoder::{embed, init_params, DropoutMasks, EmbeddingBatch, EmbeddingSlice, ModelDims, ModelParams, Projection};
use crate::error::Result;
use crate::objectives::{evaluate_objective, AdvTerm, Divergence, LossWeights, ObjectiveInputs, ObjectiveSettings, StopGrad};
use crate::rng::{derive_rng, CodaRng};
use crate::tensor::Matrix;

const STRATEGIES: [&str; 8] = [
    "stack(back,adv)",
    "adv",
    "cutoff",
    "mixup",
    "stack(replace,cutoff,adv)",
    "mix(back,adv)",
    "stack(back,mixup)",
    "back",
];

#[derive(Debug, Clone, Copy)]
pub struct CaseShape {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_proj: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub max_len: usize,
}

impl Default for CaseShape {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            d_emb: 16,
            d_hid: 32,
            d_proj: 8,
            num_classes: 3,
            batch: 4,
            max_len: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Central-difference step.
    pub step: f64,
    /// Bound on `|a − n| / max(|a|, |n|)` for coordinates at or above `floor`.
    pub rel: f64,
    /// Bound on `|a − n|` for coordinates below `floor`, where relative error is rounding noise.
    pub abs: f64,
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel: 1e-4,
            abs: 1e-8,
            floor: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale >= self.floor {
            diff <= self.rel * scale
        } else {
            diff <= self.abs
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub failures: usize,
    /// Coordinates below the tolerance floor, checked absolutely.
    pub below_floor: usize,
    /// `|a − n| / max(|a|, |n|)` at the worst coordinate above the floor.
    pub max_rel_error: f64,
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub seed: u64,
    pub strategy: String,
    pub tensors: Vec<TensorCheck>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failures == 0)
    }
}

struct Case {
    params: ModelParams,
    tokens: Vec<TokenSequence>,
    labels: Vec<Vec<f64>>,
    augmented: EmbeddingBatch,
    aug_labels: Vec<Vec<f64>>,
    masks: Arc<DropoutMasks>,
    keys: Projection,
    bank: Vec<f64>,
    aug_in_contrast: Vec<bool>,
    settings: ObjectiveSettings,
    strategy: String,
}

fn unit_vector(rng: &mut CodaRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = crate::tensor::l2_norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn synthetic_vocab(size: usize) -> Vocabulary {
    let words: Vec<String> = (0..size.saturating_sub(crate::corpus::NUM_RESERVED))
        .map(|i| format!("w{i}"))
        .collect();
    build_vocab_from_texts(words.iter().map(String::as_str), 1, size)
}

fn build_case(seed: u64, shape: CaseShape) -> Result<Case> {
    let mut rng = derive_rng(seed, &[0x6772_6164]);
    let dims = ModelDims {
        vocab_size: shape.vocab_size,
        d_emb: shape.d_emb,
        d_hid: shape.d_hid,
        d_proj: shape.d_proj,
        num_classes: shape.num_classes,
    };
    let mut params = init_params(dims, seed)?;
    for (name, t) in params.tensors_mut() {
        if name.contains("_b") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let vocab = synthetic_vocab(shape.vocab_size);
    let mut texts = Vec::new();
    let mut examples = Vec::new();
    for _ in 0..shape.batch {
        let len = rng.random_range(1..=shape.max_len);
        let words: Vec<String> = (0..len)
            .map(|_| format!("w{}", rng.random_range(0..shape.vocab_size - crate::corpus::NUM_RESERVED)))
            .collect();
        let text = words.join(" ");
        let mut label: Vec<f64> = (0..shape.num_classes).map(|_| rng.random_range(0.05..1.0)).collect();
        if rng.random_bool(0.5) {
            let c = rng.random_range(0..shape.num_classes);
            label.iter_mut().enumerate().for_each(|(i, v)| *v = if i == c { 1.0 } else { 0.0 });
        } else {
            let s: f64 = label.iter().sum();
            label.iter_mut().for_each(|v| *v /= s);
        }
        texts.push(text.clone());
        examples.push(LabeledExample {
            tokens: tokenize(&text, &vocab),
            label,
        });
    }
    let table = ParaphraseTable::from_pairs(texts.iter().map(|t| {
        let mut w: Vec<&str> = t.split(' ').collect();
        w.reverse();
        (t.clone(), w.join(" "))
    }));
    let sampler = UnigramSampler::new(&vocab);
    let settings = AugmentSettings {
        cutoff_ratio: rng.random_range(0.1..0.5),
        replace_rate: 0.3,
        epsilon: rng.random_range(0.1..2.0),
        adv_steps: rng.random_range(1..=2),
        mixup_alpha: 1.0,
    };
    let strategy = STRATEGIES[rng.random_range(0..STRATEGIES.len())];
    let spec = StrategySpec::parse(strategy, settings)?;
    let masks = Arc::new(DropoutMasks::sample(shape.batch, shape.d_hid, 0.2, &mut rng));
    let pairs = {
        let mut oracle = CrossEntropyOracle::with_masks(&params, Arc::clone(&masks));
        let mut ctx = AugmentContext {
            vocab: &vocab,
            table: &table,
            sampler: &sampler,
            embed_table: &params.embed,
            oracle: &mut oracle,
        };
        apply_strategy(&spec, &examples, &mut ctx, &mut rng)?
    };
    let mut slices = Vec::new();
    let mut aug_labels = Vec::new();
    for p in pairs {
        slices.push(match (p.augmented_embeddings, p.augmented_tokens) {
            (Some(e), _) => e,
            (_, Some(t)) => EmbeddingSlice::from_tokens(&params.embed, &t)?,
            _ => unreachable!("every pair has an output"),
        });
        aug_labels.push(p.label);
    }
    let augmented = EmbeddingBatch::from_slices(slices, shape.d_emb)?;

    let mut unit = Matrix::zeros(shape.batch, shape.d_proj);
    let mut flagged = vec![false; shape.batch];
    for i in 0..shape.batch {
        if rng.random_bool(0.15) {
            flagged[i] = true;
        } else {
            unit.row_mut(i).copy_from_slice(&unit_vector(&mut rng, shape.d_proj));
        }
    }
    let keys = Projection {
        unit,
        norms: vec![1.0; shape.batch],
        flagged,
    };
    let bank_len = rng.random_range(0..=6);
    let bank: Vec<f64> = (0..bank_len).flat_map(|_| unit_vector(&mut rng, shape.d_proj)).collect();
    let weights = LossWeights {
        alpha: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.0..3.0),
        lambda: rng.random_range(0.05..1.0),
    };
    let settings = ObjectiveSettings {
        weights,
        tau: rng.random_range(0.3..2.0),
        adv_term: if rng.random_bool(0.5) { AdvTerm::At } else { AdvTerm::Vat },
        divergence: if rng.random_bool(0.7) { Divergence::Js } else { Divergence::Kl },
        stop_grad: StopGrad::None,
    };
    Ok(Case {
        params,
        tokens: examples.iter().map(|e| e.tokens.clone()).collect(),
        labels: examples.into_iter().map(|e| e.label).collect(),
        augmented,
        aug_labels,
        masks,
        keys,
        bank,
        aug_in_contrast: vec![!spec.involves_mixup(); shape.batch],
        settings,
        strategy: spec.name(),
    })
}

fn loss_at(case: &Case, params: &ModelParams, original: &EmbeddingBatch, augmented: &EmbeddingBatch) -> Result<f64> {
    let inputs = ObjectiveInputs {
        original,
        augmented,
        labels: &case.labels,
        aug_labels: &case.aug_labels,
        masks: Some(&case.masks),
        keys: &case.keys,
        bank: &case.bank,
        aug_in_contrast: &case.aug_in_contrast,
        settings: case.settings,
    };
    Ok(evaluate_objective(params, &inputs, false)?.0.total)
}

struct Tracker {
    check: TensorCheck,
    tol: Tolerance,
}

impl Tracker {
    fn new(name: &str, tol: Tolerance) -> Self {
        Self {
            check: TensorCheck {
                name: name.to_string(),
                coordinates: 0,
                failures: 0,
                below_floor: 0,
                max_rel_error: 0.0,
                worst: (0.0, 0.0),
            },
            tol,
        }
    }

    fn observe(&mut self, analytic: f64, numeric: f64) {
        let c = &mut self.check;
        c.coordinates += 1;
        if !self.tol.accepts(analytic, numeric) {
            c.failures += 1;
        }
        let scale = analytic.abs().max(numeric.abs());
        if scale < self.tol.floor {
            c.below_floor += 1;
            return;
        }
        let rel = (analytic - numeric).abs() / scale;
        if rel > c.max_rel_error {
            c.max_rel_error = rel;
            c.worst = (analytic, numeric);
        }
    }
}

/// Runs one randomized case.
pub fn check_case(seed: u64, shape: CaseShape, tol: Tolerance) -> Result<CaseReport> {
    let case = build_case(seed, shape)?;
    let original = embed(&case.params, &case.tokens)?;
    let inputs = ObjectiveInputs {
        original: &original,
        augmented: &case.augmented,
        labels: &case.labels,
        aug_labels: &case.aug_labels,
        masks: Some(&case.masks),
        keys: &case.keys,
        bank: &case.bank,
        aug_in_contrast: &case.aug_in_contrast,
        settings: case.settings,
    };
    let grads = evaluate_objective(&case.params, &inputs, true)?.1.expect("gradients requested");
    let h = tol.step;
    let mut tensors = Vec::new();

    let names: Vec<&str> = case.params.tensors().iter().map(|(n, _)| *n).collect();
    for (ti, name) in names.iter().enumerate() {
        let mut tracker = Tracker::new(name, tol);
        let len = case.params.tensors()[ti].1.data.len();
        for k in 0..len {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = case.params.clone();
                p.tensors_mut()[ti].1.data[k] += delta;
                let orig = embed(&p, &case.tokens)?;
                let aug = case.augmented.rematerialize(&p.embed);
                loss_at(&case, &p, &orig, &aug)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            tracker.observe(grads.params.tensors()[ti].1.data[k], numeric);
        }
        tensors.push(tracker.check);
    }

    for (name, which) in [("input.original", 0), ("input.augmented", 1)] {
        let mut tracker = Tracker::new(name, tol);
        let base = if which == 0 { &original } else { &case.augmented };
        let analytic = if which == 0 { &grads.original_input } else { &grads.augmented_input };
        for k in 0..base.values.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut b = base.clone();
                b.values[k] += delta;
                if which == 0 {
                    loss_at(&case, &case.params, &b, &case.augmented)
                } else {
                    loss_at(&case, &case.params, &original, &b)
                }
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            tracker.observe(analytic[k], numeric);
        }
        tensors.push(tracker.check);
    }

    Ok(CaseReport {
        seed,
        strategy: case.strategy,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_regimes() {
        let tol = Tolerance::default();
        assert!(tol.accepts(1.0, 1.0 + 0.9e-4));
        assert!(!tol.accepts(1.0, 1.0 + 1.1e-4));
        // above the floor the bound is purely relative
        assert!(!tol.accepts(2e-6, 2e-6 + 5e-9));
        assert!(tol.accepts(1e-7, 1e-7 + 5e-9));
        assert!(!tol.accepts(0.0, 2e-8));
    }

    #[test]
    fn one_case_passes() {
        let report = check_case(3, CaseShape::default(), Tolerance::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.tensors.iter().all(|t| t.max_rel_error <= 1e-4));
    }
}
