//! The training loop: batch assembly, augmentation with an adversarial inner
//! step under shared dropout masks, the composed loss, Adam, momentum and bank
//! updates, and evaluation.

mod adam;
mod config;
mod sweep;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, scheduled_lr, AdamHyper, AdamState};
pub use config::{TrainConfig, ALPHA_WINDOW, BETA_WINDOW, LAMBDA_WINDOW};
pub use sweep::{low_resource_sweep, Method, SweepRow};

use crate::augment::{apply_strategy, AugmentContext, CrossEntropyOracle, StrategySpec, UnigramSampler};
use crate::contrast::{effective_capacity, MemoryBank, MomentumState};
use crate::corpus::{argmax, LabeledDataset, LabeledExample, ParaphraseTable, TokenSequence, Vocabulary};
use crate::encoder::{
    embed, forward, init_params, softmax_rows, Dropout, DropoutMasks, EmbeddingBatch, EmbeddingSlice,
    ModelDims, ModelParams,
};
use crate::error::{CodaError, Result};
use crate::objectives::{cross_entropy, evaluate_objective, LossBreakdown, ObjectiveInputs};
use crate::rng::{derive_rng, stream};

const EVAL_CHUNK: usize = 256;

/// Read-only inputs shared by every step.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub vocab: &'a Vocabulary,
    pub table: &'a ParaphraseTable,
    pub sampler: &'a UnigramSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub key: MomentumState,
    pub bank: MemoryBank,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &TrainConfig, train_size: usize) -> Result<Self> {
        let bank = MemoryBank::new(effective_capacity(config.bank_capacity, train_size), params.dims().d_proj)?;
        Ok(Self {
            key: MomentumState::new(&params, config.gamma)?,
            adam: AdamState::new(&params),
            bank,
            params,
            step: 0,
        })
    }
}

/// Dropout masks observed inside one step.
#[derive(Debug, Clone)]
pub struct MaskTrace {
    /// Sampled by the first forward of the original batch.
    pub original: Arc<DropoutMasks>,
    /// Used by each gradient evaluation of the adversarial inner step.
    pub adversarial: Vec<Option<Arc<DropoutMasks>>>,
    /// Used by the original and transformed forwards of the loss.
    pub objective: [Option<Arc<DropoutMasks>>; 2],
}

impl MaskTrace {
    /// Every recorded use refers to the very tensors sampled first.
    pub fn all_shared(&self) -> bool {
        let same = |m: &Option<Arc<DropoutMasks>>| m.as_ref().is_some_and(|m| Arc::ptr_eq(m, &self.original));
        self.adversarial.iter().all(same) && self.objective.iter().all(same)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Train-mode accuracy of the first forward on the original batch.
    pub accuracy: f64,
    pub lr: f64,
    pub keys_stored: usize,
    pub masks: MaskTrace,
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(config: &TrainConfig, train_size: usize) -> Self {
        let per_epoch = train_size.div_ceil(config.batch_size).max(1) as u64;
        let total_steps = per_epoch * config.epochs as u64;
        let warmup_steps = (config.warmup_ratio * total_steps as f64).ceil() as u64;
        Self {
            warmup_steps,
            total_steps,
        }
    }
}

fn transformed_batch(
    pairs: Vec<crate::augment::AugmentedPair>,
    table: &crate::tensor::Matrix,
) -> Result<(EmbeddingBatch, Vec<Vec<f64>>)> {
    let mut slices = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = match (p.augmented_embeddings, p.augmented_tokens) {
            (Some(e), _) => e,
            (None, Some(t)) => EmbeddingSlice::from_tokens(table, &t)?,
            (None, None) => return Err(CodaError::Strategy("transform produced no output".into())),
        };
        slices.push(s);
        labels.push(p.label);
    }
    Ok((EmbeddingBatch::from_slices(slices, table.cols)?, labels))
}

/// One optimization step on `batch`. All randomness is derived from `config.seed` and the step number.
pub fn train_step(
    state: &mut TrainState,
    batch: &[LabeledExample],
    config: &TrainConfig,
    spec: &StrategySpec,
    res: Resources<'_>,
    schedule: Schedule,
    batch_index: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(CodaError::Shape("empty training batch".into()));
    }
    let step = state.step + 1;
    let tokens: Vec<TokenSequence> = batch.iter().map(|e| e.tokens.clone()).collect();
    let labels: Vec<Vec<f64>> = batch.iter().map(|e| e.label.clone()).collect();

    let original = embed(&state.params, &tokens)?;
    let mut drop_rng = derive_rng(config.seed, &[stream::DROPOUT, step]);
    let first = forward(
        &state.params,
        &original,
        Dropout::Fresh {
            rate: config.dropout_rate,
            rng: &mut drop_rng,
        },
    )?;
    let masks = first.cache.masks().cloned().expect("train-mode forward records masks");
    let correct = (0..batch.len())
        .filter(|&i| argmax(first.logits.row(i)) == batch[i].class())
        .count();

    let mut oracle = CrossEntropyOracle::with_masks(&state.params, Arc::clone(&masks));
    let mut aug_rng = derive_rng(config.seed, &[stream::AUGMENT, step]);
    let pairs = {
        let mut ctx = AugmentContext {
            vocab: res.vocab,
            table: res.table,
            sampler: res.sampler,
            embed_table: &state.params.embed,
            oracle: &mut oracle,
        };
        apply_strategy(spec, batch, &mut ctx, &mut aug_rng)?
    };
    let adversarial = std::mem::take(&mut oracle.used_masks);
    let (augmented, aug_labels) = transformed_batch(pairs, &state.params.embed)?;

    let keys = state.key.compute_keys(&tokens)?;
    let bank = state.bank.snapshot();
    let aug_in_contrast = vec![!spec.involves_mixup(); batch.len()];
    let mut settings = config.objective_settings();
    if step <= config.contrast_warmup_steps {
        settings.weights.lambda = 0.0;
    }
    let inputs = ObjectiveInputs {
        original: &original,
        augmented: &augmented,
        labels: &labels,
        aug_labels: &aug_labels,
        masks: Some(&masks),
        keys: &keys,
        bank: bank.as_flat(),
        aug_in_contrast: &aug_in_contrast,
        settings,
    };
    let (loss, grads) = evaluate_objective(&state.params, &inputs, true)?;
    let grads = grads.expect("gradients requested");
    if !loss.is_finite() || !grads.params.is_finite() {
        log::error!("non-finite loss at step {step}, batch {batch_index}: {loss:?}");
        return Err(CodaError::NonFiniteLoss {
            step,
            batch_index,
            detail: format!("{loss:?}"),
        });
    }

    let lr = scheduled_lr(config.lr, step, schedule.warmup_steps, schedule.total_steps);
    let hyper = AdamHyper {
        lr,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };
    adam_update(&mut state.params, &grads.params, &mut state.adam, hyper, step)?;
    state.key.update(&state.params)?;
    let keys_stored = state.bank.push(&keys)?;
    state.step = step;

    Ok(StepOutcome {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
        lr,
        keys_stored,
        masks: MaskTrace {
            original: masks,
            adversarial,
            objective: grads.masks,
        },
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Eval-mode accuracy and mean cross-entropy over `dataset` (which must be tokenized).
pub fn evaluate(params: &ModelParams, dataset: &LabeledDataset, split: &str) -> Result<MetricsRecord> {
    let mut record = MetricsRecord {
        step: 0,
        epoch: 0,
        split: split.to_string(),
        accuracy: 0.0,
        loss: LossBreakdown::default(),
        wall_time: None,
        warning: None,
    };
    if dataset.is_empty() {
        log::warn!("evaluating on an empty {split} set; accuracy reported as 0");
        record.warning = Some("empty dataset".into());
        return Ok(record);
    }
    let mut correct = 0usize;
    let mut ce = 0.0;
    for chunk in dataset.examples.chunks(EVAL_CHUNK) {
        let tokens: Vec<TokenSequence> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let out = forward(params, &embed(params, &tokens)?, Dropout::off())?;
        let p = softmax_rows(&out.logits);
        for (i, ex) in chunk.iter().enumerate() {
            if argmax(out.logits.row(i)) == ex.class() {
                correct += 1;
            }
            ce += cross_entropy(p.row(i), &ex.label);
        }
    }
    let n = dataset.len() as f64;
    record.accuracy = correct as f64 / n;
    record.loss.ce = ce / n;
    record.loss.total = ce / n;
    Ok(record)
}

/// Hooks called while training.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState, _label: &str) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub best_dev: Option<MetricsRecord>,
    pub final_dev: Option<MetricsRecord>,
    pub final_loss: LossBreakdown,
}

pub fn model_dims(config: &TrainConfig, vocab_size: usize, num_classes: usize) -> ModelDims {
    ModelDims {
        vocab_size,
        d_emb: config.d_emb,
        d_hid: config.d_hid,
        d_proj: config.d_proj,
        num_classes,
    }
}

/// Trains on `train` (tokenized with `res.vocab`) for `config.epochs` epochs.
///
/// `initial` replaces the seeded initialization, e.g. for warm starts.
pub fn fit(
    train: &LabeledDataset,
    dev: Option<&LabeledDataset>,
    config: &TrainConfig,
    res: Resources<'_>,
    initial: Option<ModelParams>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(CodaError::Config("training set is empty".into()));
    }
    let spec = config.strategy_spec()?;
    let dims = model_dims(config, res.vocab.len(), train.num_classes);
    let params = match initial {
        Some(p) if p.dims() == dims => p,
        Some(p) => {
            return Err(CodaError::Shape(format!(
                "initial parameters have dims {:?}, run needs {dims:?}",
                p.dims()
            )))
        }
        None => init_params(dims, config.seed)?,
    };
    let mut state = TrainState::new(params, config, train.len())?;
    let schedule = Schedule::new(config, train.len());
    let started = Instant::now();
    let wall = |config: &TrainConfig| config.record_wall_time.then(|| started.elapsed().as_secs_f64());

    let mut records = Vec::new();
    let mut best_dev: Option<MetricsRecord> = None;
    let mut final_dev = None;
    let mut final_loss = LossBreakdown::default();
    let emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>, observer: &mut dyn TrainObserver| {
        let res = observer.on_record(&r);
        records.push(r);
        res
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut derive_rng(config.seed, &[stream::SHUFFLE, epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (batch_index, idx) in batches.iter().enumerate() {
            let batch: Vec<LabeledExample> = idx.iter().map(|&i| train.examples[i].clone()).collect();
            let out = train_step(&mut state, &batch, config, &spec, res, schedule, batch_index)?;
            final_loss = out.loss;
            let rec = MetricsRecord {
                step: state.step,
                epoch,
                split: "train".into(),
                accuracy: out.accuracy,
                loss: out.loss,
                wall_time: wall(config),
                warning: None,
            };
            emit(rec, &mut records, observer)?;

            let last_in_epoch = batch_index + 1 == batches.len();
            let due = if config.eval_every == 0 {
                last_in_epoch
            } else {
                state.step % config.eval_every == 0 || (last_in_epoch && epoch == config.epochs)
            };
            if due {
                if let Some(dev) = dev {
                    let mut r = evaluate(&state.params, dev, "dev")?;
                    r.step = state.step;
                    r.epoch = epoch;
                    r.wall_time = wall(config);
                    if best_dev.as_ref().is_none_or(|b| r.accuracy > b.accuracy) {
                        best_dev = Some(r.clone());
                    }
                    final_dev = Some(r.clone());
                    emit(r, &mut records, observer)?;
                }
                observer.on_checkpoint(&state, &format!("step{:06}", state.step))?;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        records,
        best_dev,
        final_dev,
        final_loss,
    })
}
