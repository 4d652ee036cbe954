//! Label-preserving transformations and the strategies that combine them.
//!
//! Token-level transforms (`back`, `replace`) rewrite token sequences;
//! embedding-level transforms (`cutoff`, `mixup`, `adv`) act on input
//! embeddings. A strategy is one of `single(t)`, `random(t, ...)`,
//! `mix(a, b)` or `stack(t, ...)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, LabeledExample, ParaphraseTable, TokenSequence, Vocabulary, NUM_RESERVED};
use crate::encoder::{
    backward, forward, softmax_rows, Dropout, DropoutMasks, EmbeddingBatch, EmbeddingSlice,
    ModelParams, Upstream,
};
use crate::error::{CodaError, Result};
use crate::objectives::{cross_entropy_grad, softmax_backward};
use crate::rng::{derive_rng, stream, CodaRng};
use crate::tensor::Matrix;

/// Gradients smaller than this leave the input unperturbed.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// No change; only meaningful as a `mix` operand or a diagnostic baseline.
    Ori,
    Back,
    Replace,
    Cutoff,
    Mixup,
    Adv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Token,
    Embedding,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Ori,
        Transform::Back,
        Transform::Replace,
        Transform::Cutoff,
        Transform::Mixup,
        Transform::Adv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Ori => "ori",
            Transform::Back => "back",
            Transform::Replace => "replace",
            Transform::Cutoff => "cutoff",
            Transform::Mixup => "mixup",
            Transform::Adv => "adv",
        }
    }

    pub fn level(self) -> Option<Level> {
        match self {
            Transform::Ori => None,
            Transform::Back | Transform::Replace => Some(Level::Token),
            Transform::Cutoff | Transform::Mixup | Transform::Adv => Some(Level::Embedding),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_lowercase().as_str() {
            "ori" | "identity" | "none" => Transform::Ori,
            "back" | "back-translation" | "backtrans" => Transform::Back,
            "replace" | "cbert" | "c-bert" => Transform::Replace,
            "cut" | "cutoff" => Transform::Cutoff,
            "mixup" => Transform::Mixup,
            "adv" | "adversarial" => Transform::Adv,
            other => return Err(CodaError::Strategy(format!("unknown transform {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Single,
    Random,
    MixCombine,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub cutoff_ratio: f64,
    pub replace_rate: f64,
    pub epsilon: f64,
    pub adv_steps: usize,
    pub mixup_alpha: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            cutoff_ratio: 0.1,
            replace_rate: 0.15,
            epsilon: 1.0,
            adv_steps: 1,
            mixup_alpha: 1.0,
        }
    }
}

impl AugmentSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CodaError::Config(m));
        if !(0.0..1.0).contains(&self.cutoff_ratio) {
            return bad(format!("cutoff_ratio {} outside [0, 1)", self.cutoff_ratio));
        }
        if !(0.0..=1.0).contains(&self.replace_rate) {
            return bad(format!("replace_rate {} outside [0, 1]", self.replace_rate));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be > 0", self.epsilon));
        }
        if self.adv_steps == 0 {
            return bad("adv_steps must be >= 1".into());
        }
        if !(self.mixup_alpha > 0.0) {
            return bad(format!("mixup_alpha {} must be > 0", self.mixup_alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub operands: Vec<Transform>,
    pub settings: AugmentSettings,
}

impl StrategySpec {
    pub fn single(t: Transform) -> Self {
        Self {
            kind: StrategyKind::Single,
            operands: vec![t],
            settings: AugmentSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: AugmentSettings) -> Self {
        self.settings = settings;
        self
    }

    /// Parses `back`, `single(back)`, `stack(back,adv)`, `random(back,cutoff,adv)`, `mix(ori,back)`.
    pub fn parse(s: &str, settings: AugmentSettings) -> Result<Self> {
        let s = s.trim();
        let (kind, body) = match s.find('(') {
            None => ("single", s),
            Some(open) => {
                if !s.ends_with(')') {
                    return Err(CodaError::Strategy(format!("unbalanced parentheses in {s:?}")));
                }
                (s[..open].trim(), &s[open + 1..s.len() - 1])
            }
        };
        let kind = match kind.to_lowercase().as_str() {
            "single" => StrategyKind::Single,
            "random" => StrategyKind::Random,
            "mix" | "mix_combine" => StrategyKind::MixCombine,
            "stack" => StrategyKind::Stack,
            other => return Err(CodaError::Strategy(format!("unknown strategy kind {other:?}"))),
        };
        let operands = body
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(Transform::from_str)
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            kind,
            operands,
            settings,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks operand counts and that no token-level transform follows an embedding-level one.
    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        let n = self.operands.len();
        let err = |m: String| Err(CodaError::Strategy(format!("{self}: {m}")));
        match self.kind {
            StrategyKind::Single if n != 1 => return err("single takes exactly one transform".into()),
            StrategyKind::MixCombine if n != 2 => return err("mix takes exactly two transforms".into()),
            StrategyKind::Random | StrategyKind::Stack if n == 0 => {
                return err("needs at least one transform".into())
            }
            _ => {}
        }
        if self.kind == StrategyKind::Stack {
            let mut seen_embedding: Option<Transform> = None;
            for &t in &self.operands {
                match t.level() {
                    Some(Level::Embedding) => seen_embedding = Some(t),
                    Some(Level::Token) => {
                        if let Some(e) = seen_embedding {
                            return err(format!(
                                "token-level `{t}` cannot follow embedding-level `{e}`"
                            ));
                        }
                    }
                    None => {
                        if n > 1 {
                            return err("`ori` cannot be stacked".into());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Whether any output of this strategy is a mixup interpolation.
    pub fn involves_mixup(&self) -> bool {
        self.kind == StrategyKind::MixCombine || self.operands.contains(&Transform::Mixup)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<&str> = self.operands.iter().map(|t| t.name()).collect();
        let kind = match self.kind {
            StrategyKind::Single => return write!(f, "{}", ops.join(",")),
            StrategyKind::Random => "random",
            StrategyKind::MixCombine => "mix",
            StrategyKind::Stack => "stack",
        };
        write!(f, "{kind}({})", ops.join(","))
    }
}

/// One transformed example. Exactly one of the two `augmented_*` fields is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub original: LabeledExample,
    pub augmented_tokens: Option<TokenSequence>,
    pub augmented_embeddings: Option<EmbeddingSlice>,
    pub label: Vec<f64>,
    pub provenance: Vec<String>,
}

impl AugmentedPair {
    fn identity(ex: &LabeledExample, name: &str) -> Self {
        Self {
            original: ex.clone(),
            augmented_tokens: Some(ex.tokens.clone()),
            augmented_embeddings: None,
            label: ex.label.clone(),
            provenance: vec![name.to_string()],
        }
    }
}

pub fn back_translate(ex: &LabeledExample, table: &ParaphraseTable, vocab: &Vocabulary) -> AugmentedPair {
    let mut pair = AugmentedPair::identity(ex, Transform::Back.name());
    if ex.text().trim().is_empty() {
        return pair;
    }
    if let Some(para) = table.lookup(ex.text()) {
        pair.augmented_tokens = Some(tokenize(para, vocab));
    }
    pair
}

/// Samples non-reserved tokens proportionally to their corpus counts.
#[derive(Debug, Clone)]
pub struct UnigramSampler {
    dist: Option<WeightedIndex<u64>>,
}

impl UnigramSampler {
    pub fn new(vocab: &Vocabulary) -> Self {
        let weights: Vec<u64> = vocab.unigram().map(|(_, f)| f).collect();
        let dist = if weights.iter().any(|&w| w > 0) {
            WeightedIndex::new(weights).ok()
        } else {
            None
        };
        Self { dist }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Option<u32> {
        self.dist
            .as_ref()
            .map(|d| (d.sample(rng) + NUM_RESERVED) as u32)
    }

    pub fn replace(&self, ex: &LabeledExample, rate: f64, rng: &mut impl Rng) -> AugmentedPair {
        let mut pair = AugmentedPair::identity(ex, Transform::Replace.name());
        let tokens = pair.augmented_tokens.as_mut().expect("identity has tokens");
        if self.dist.is_none() || rate <= 0.0 {
            return pair;
        }
        for id in tokens.ids.iter_mut() {
            if Vocabulary::is_reserved(*id) {
                continue;
            }
            if rng.random::<f64>() < rate {
                *id = self.sample(rng).expect("sampler is non-empty");
            }
        }
        pair
    }
}

/// Replaces each non-reserved token with probability `rate` by a unigram draw.
pub fn word_replace(ex: &LabeledExample, vocab: &Vocabulary, rate: f64, rng: &mut impl Rng) -> AugmentedPair {
    UnigramSampler::new(vocab).replace(ex, rate, rng)
}

/// Window width `ceil(ratio · len)`, robust to representation error in the product.
pub fn cutoff_width(ratio: f64, len: usize) -> usize {
    let w = (ratio * len as f64 - 1e-9).ceil().max(0.0) as usize;
    w.min(len)
}

/// Zeroes one contiguous window of real tokens, values and mask together.
pub fn cutoff_slice(e: &mut EmbeddingSlice, ratio: f64, rng: &mut impl Rng) {
    let valid: Vec<usize> = (0..e.len()).filter(|&t| e.mask[t] != 0.0).collect();
    let l = valid.len();
    let w = cutoff_width(ratio, l);
    if w == 0 {
        return;
    }
    let start = rng.random_range(0..=l - w);
    for &t in &valid[start..start + w] {
        e.zero_position(t);
    }
}

pub fn cutoff(batch: &EmbeddingBatch, ratio: f64, rng: &mut impl Rng) -> Result<EmbeddingBatch> {
    let mut slices = batch.slices();
    for s in slices.iter_mut() {
        cutoff_slice(s, ratio, rng);
    }
    EmbeddingBatch::from_slices(slices, batch.d_emb)
}

/// Interpolation with a given coefficient `a`: `a·(e_i, y_i) + (1 − a)·(e_j, y_j)`.
pub fn mixup_with(
    e_i: &EmbeddingSlice,
    e_j: &EmbeddingSlice,
    y_i: &[f64],
    y_j: &[f64],
    a: f64,
) -> Result<(EmbeddingSlice, Vec<f64>)> {
    if y_i.len() != y_j.len() {
        return Err(CodaError::Shape(format!(
            "mixup labels of dimension {} and {}",
            y_i.len(),
            y_j.len()
        )));
    }
    let e = e_i.interpolate(e_j, a)?;
    let y = y_i.iter().zip(y_j).map(|(u, v)| a * u + (1.0 - a) * v).collect();
    Ok((e, y))
}

pub fn sample_mix_coefficient(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| CodaError::Config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// Mixup with `a ~ Beta(alpha, alpha)`.
pub fn mixup(
    e_i: &EmbeddingSlice,
    e_j: &EmbeddingSlice,
    y_i: &[f64],
    y_j: &[f64],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(EmbeddingSlice, Vec<f64>)> {
    let a = sample_mix_coefficient(alpha, rng)?;
    mixup_with(e_i, e_j, y_i, y_j, a)
}

/// `ε · g/‖g‖₂` over unmasked positions, or `None` when `‖g‖₂` is below [`MIN_GRAD_NORM`].
pub fn normalized_step(mask: &[f64], grad: &[f64], epsilon: f64) -> Result<Option<Vec<f64>>> {
    let d = if mask.is_empty() { 0 } else { grad.len() / mask.len() };
    if d * mask.len() != grad.len() {
        return Err(CodaError::Shape(format!(
            "gradient of length {} for {} positions",
            grad.len(),
            mask.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(CodaError::Numerical("non-finite adversarial gradient".into()));
    }
    let mut sq = 0.0;
    for (t, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            sq += grad[t * d..(t + 1) * d].iter().map(|g| g * g).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm < MIN_GRAD_NORM {
        return Ok(None);
    }
    let scale = epsilon / norm;
    let mut step = vec![0.0; grad.len()];
    for (t, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            for (s, g) in step[t * d..(t + 1) * d].iter_mut().zip(&grad[t * d..(t + 1) * d]) {
                *s = scale * g;
            }
        }
    }
    Ok(Some(step))
}

/// `e + ε·g/‖g‖₂`, the norm taken jointly over all unpadded positions and dimensions.
pub fn adversarial_perturb(e: &EmbeddingSlice, input_grad: &[f64], epsilon: f64) -> Result<EmbeddingSlice> {
    if !(epsilon > 0.0) {
        return Err(CodaError::Config(format!("epsilon {epsilon} must be > 0")));
    }
    if input_grad.len() != e.values.len() {
        return Err(CodaError::Shape(format!(
            "gradient of length {} for an embedding of length {}",
            input_grad.len(),
            e.values.len()
        )));
    }
    let mut out = e.clone();
    if let Some(step) = normalized_step(&e.mask, input_grad, epsilon)? {
        out.add_offset(&step);
    }
    Ok(out)
}

/// Source of loss gradients with respect to input embeddings.
pub trait GradientOracle {
    fn input_gradient(&mut self, batch: &EmbeddingBatch, labels: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Gradient of the summed cross-entropy, optionally under fixed dropout masks.
pub struct CrossEntropyOracle<'a> {
    params: &'a ModelParams,
    masks: Option<Arc<DropoutMasks>>,
    /// Masks used by each call, in order.
    pub used_masks: Vec<Option<Arc<DropoutMasks>>>,
}

impl<'a> CrossEntropyOracle<'a> {
    pub fn eval(params: &'a ModelParams) -> Self {
        Self {
            params,
            masks: None,
            used_masks: Vec::new(),
        }
    }

    pub fn with_masks(params: &'a ModelParams, masks: Arc<DropoutMasks>) -> Self {
        Self {
            params,
            masks: Some(masks),
            used_masks: Vec::new(),
        }
    }
}

impl GradientOracle for CrossEntropyOracle<'_> {
    fn input_gradient(&mut self, batch: &EmbeddingBatch, labels: &[Vec<f64>]) -> Result<Vec<f64>> {
        let dropout = match &self.masks {
            Some(m) => Dropout::reuse(m),
            None => Dropout::off(),
        };
        let out = forward(self.params, batch, dropout)?;
        self.used_masks.push(out.cache.masks().cloned());
        let p = softmax_rows(&out.logits);
        let mut dlogits = Matrix::zeros(p.rows, p.cols);
        for i in 0..p.rows {
            let dp = cross_entropy_grad(p.row(i), &labels[i]);
            dlogits.row_mut(i).copy_from_slice(&softmax_backward(p.row(i), &dp));
        }
        let g = backward(
            self.params,
            &out.cache,
            Upstream {
                logits: Some(&dlogits),
                projection: None,
            },
        )?;
        Ok(g.input_grad)
    }
}

/// K ascent steps; after each, the accumulated perturbation is rescaled onto the ε-sphere.
pub fn adversarial_batch(
    batch: &EmbeddingBatch,
    labels: &[Vec<f64>],
    oracle: &mut dyn GradientOracle,
    epsilon: f64,
    steps: usize,
) -> Result<EmbeddingBatch> {
    let (l, d) = (batch.max_len, batch.d_emb);
    let per = l * d;
    let mut delta: Vec<Option<Vec<f64>>> = vec![None; batch.batch];
    let mut current = batch.clone();
    for _ in 0..steps.max(1) {
        let grad = oracle.input_gradient(&current, labels)?;
        let mut slices = batch.slices();
        for (i, s) in slices.iter_mut().enumerate() {
            let g = &grad[i * per..(i + 1) * per];
            if let Some(step) = normalized_step(&s.mask, g, epsilon)? {
                let acc = match delta[i].take() {
                    None => step,
                    Some(prev) => {
                        let mut sum: Vec<f64> = prev.iter().zip(&step).map(|(a, b)| a + b).collect();
                        let n = crate::tensor::l2_norm(&sum);
                        if n >= MIN_GRAD_NORM {
                            sum.iter_mut().for_each(|v| *v *= epsilon / n);
                        }
                        sum
                    }
                };
                delta[i] = Some(acc);
            }
            if let Some(dl) = &delta[i] {
                s.add_offset(dl);
            }
        }
        current = EmbeddingBatch::from_slices(slices, d)?;
    }
    Ok(current)
}

/// Shared state for applying a strategy to a batch.
pub struct AugmentContext<'a> {
    pub vocab: &'a Vocabulary,
    pub table: &'a ParaphraseTable,
    pub sampler: &'a UnigramSampler,
    /// Query-encoder embedding table used to embed token-level outputs.
    pub embed_table: &'a Matrix,
    pub oracle: &'a mut dyn GradientOracle,
}

struct Working {
    tokens: Vec<TokenSequence>,
    labels: Vec<Vec<f64>>,
    embeddings: Option<EmbeddingBatch>,
    provenance: Vec<String>,
}

impl Working {
    fn ensure_embedded(&mut self, table: &Matrix) -> Result<&mut EmbeddingBatch> {
        if self.embeddings.is_none() {
            let slices = self
                .tokens
                .iter()
                .map(|t| EmbeddingSlice::from_tokens(table, t))
                .collect::<Result<Vec<_>>>()?;
            self.embeddings = Some(EmbeddingBatch::from_slices(slices, table.cols)?);
        }
        Ok(self.embeddings.as_mut().expect("just embedded"))
    }
}

fn run_chain(
    chain: &[Transform],
    examples: &[LabeledExample],
    settings: &AugmentSettings,
    ctx: &mut AugmentContext<'_>,
    batch_seed: u64,
) -> Result<Working> {
    let mut w = Working {
        tokens: examples.iter().map(|e| e.tokens.clone()).collect(),
        labels: examples.iter().map(|e| e.label.clone()).collect(),
        embeddings: None,
        provenance: Vec::new(),
    };
    let n = examples.len();
    for (op_index, &t) in chain.iter().enumerate() {
        let ex_rng = |i: usize| derive_rng(batch_seed, &[stream::EXAMPLE, op_index as u64, i as u64]);
        match t {
            Transform::Ori => {}
            Transform::Back | Transform::Replace => {
                if w.embeddings.is_some() {
                    return Err(CodaError::Strategy(format!(
                        "token-level `{t}` after an embedding-level transform"
                    )));
                }
                for i in 0..n {
                    let ex = LabeledExample {
                        tokens: w.tokens[i].clone(),
                        label: w.labels[i].clone(),
                    };
                    let pair = match t {
                        Transform::Back => back_translate(&examples[i], ctx.table, ctx.vocab),
                        _ => ctx.sampler.replace(&ex, settings.replace_rate, &mut ex_rng(i)),
                    };
                    let toks = pair.augmented_tokens.expect("token-level output");
                    // Back-translation keys on the original text; stacked after
                    // another token transform it still paraphrases the source.
                    w.tokens[i] = toks;
                }
            }
            Transform::Cutoff => {
                let batch = w.ensure_embedded(ctx.embed_table)?;
                let mut slices = batch.slices();
                for (i, s) in slices.iter_mut().enumerate() {
                    cutoff_slice(s, settings.cutoff_ratio, &mut ex_rng(i));
                }
                *batch = EmbeddingBatch::from_slices(slices, batch.d_emb)?;
            }
            Transform::Mixup => {
                let slices = w.ensure_embedded(ctx.embed_table)?.slices();
                let mut mixed = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let j = (i + 1) % n;
                    let a = sample_mix_coefficient(settings.mixup_alpha, &mut ex_rng(i))?;
                    let (e, y) = mixup_with(&slices[i], &slices[j], &w.labels[i], &w.labels[j], a)?;
                    mixed.push(e);
                    labels.push(y);
                }
                w.embeddings = Some(EmbeddingBatch::from_slices(mixed, ctx.embed_table.cols)?);
                w.labels = labels;
            }
            Transform::Adv => {
                w.ensure_embedded(ctx.embed_table)?;
                let batch = w.embeddings.as_ref().expect("embedded");
                let perturbed = adversarial_batch(
                    batch,
                    &w.labels,
                    ctx.oracle,
                    settings.epsilon,
                    settings.adv_steps,
                )?;
                w.embeddings = Some(perturbed);
            }
        }
        w.provenance.push(t.name().to_string());
    }
    Ok(w)
}

fn into_pairs(w: Working, examples: &[LabeledExample]) -> Vec<AugmentedPair> {
    let slices = w.embeddings.as_ref().map(EmbeddingBatch::slices);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (augmented_tokens, augmented_embeddings) = match &slices {
                Some(s) => (None, Some(s[i].clone())),
                None => (Some(w.tokens[i].clone()), None),
            };
            AugmentedPair {
                original: ex.clone(),
                augmented_tokens,
                augmented_embeddings,
                label: w.labels[i].clone(),
                provenance: w.provenance.clone(),
            }
        })
        .collect()
}

/// Applies `spec` to one mini-batch.
pub fn apply_strategy(
    spec: &StrategySpec,
    examples: &[LabeledExample],
    ctx: &mut AugmentContext<'_>,
    rng: &mut CodaRng,
) -> Result<Vec<AugmentedPair>> {
    spec.validate()?;
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let settings = &spec.settings;
    match spec.kind {
        StrategyKind::Single | StrategyKind::Stack => {
            let seed = rng.random();
            let w = run_chain(&spec.operands, examples, settings, ctx, seed)?;
            Ok(into_pairs(w, examples))
        }
        StrategyKind::Random => {
            let pick = spec.operands[rng.random_range(0..spec.operands.len())];
            let seed = rng.random();
            let w = run_chain(&[pick], examples, settings, ctx, seed)?;
            Ok(into_pairs(w, examples))
        }
        StrategyKind::MixCombine => {
            let seed: u64 = rng.random();
            let mut left = run_chain(&spec.operands[..1], examples, settings, ctx, derive_rng(seed, &[0]).random())?;
            let mut right = run_chain(&spec.operands[1..], examples, settings, ctx, derive_rng(seed, &[1]).random())?;
            let d = ctx.embed_table.cols;
            let ls = left.ensure_embedded(ctx.embed_table)?.slices();
            let rs = right.ensure_embedded(ctx.embed_table)?.slices();
            let mut mix_rng = derive_rng(seed, &[2]);
            let mut slices = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for i in 0..examples.len() {
                let a = sample_mix_coefficient(settings.mixup_alpha, &mut mix_rng)?;
                let (e, y) = mixup_with(&ls[i], &rs[i], &left.labels[i], &right.labels[i], a)?;
                slices.push(e);
                labels.push(y);
            }
            let mut provenance = vec!["mix".to_string()];
            provenance.extend(left.provenance);
            provenance.extend(right.provenance);
            let w = Working {
                tokens: left.tokens,
                labels,
                embeddings: Some(EmbeddingBatch::from_slices(slices, d)?),
                provenance,
            };
            Ok(into_pairs(w, examples))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab_from_texts;
    use crate::encoder::{embed, init_params, ModelDims};
    use crate::tensor::l2_norm;
    use rand::SeedableRng;

    fn rng(seed: u64) -> CodaRng {
        CodaRng::seed_from_u64(seed)
    }

    fn slice(values: &[f64], d: usize) -> EmbeddingSlice {
        let len = values.len() / d;
        EmbeddingSlice {
            d_emb: d,
            values: values.to_vec(),
            mask: vec![1.0; len],
            sources: vec![Vec::new(); len],
            offset: vec![0.0; values.len()],
        }
    }

    fn example(text: &str, vocab: &Vocabulary) -> LabeledExample {
        LabeledExample {
            tokens: tokenize(text, vocab),
            label: vec![0.0, 1.0],
        }
    }

    #[test]
    fn parse_and_validate_strategies() {
        let s = AugmentSettings::default();
        let st = StrategySpec::parse("stack(back, adv)", s).unwrap();
        assert_eq!(st.kind, StrategyKind::Stack);
        assert_eq!(st.operands, vec![Transform::Back, Transform::Adv]);
        assert_eq!(st.to_string(), "stack(back,adv)");
        assert_eq!(StrategySpec::parse("back", s).unwrap().to_string(), "back");
        assert!(StrategySpec::parse("stack(adv,back)", s).is_err());
        assert!(StrategySpec::parse("stack(cut,replace)", s).is_err());
        assert!(StrategySpec::parse("stack(back,cut,adv)", s).is_ok());
        assert!(StrategySpec::parse("stack(back,adv,cut)", s).is_ok());
        assert!(StrategySpec::parse("mix(ori)", s).is_err());
        assert!(StrategySpec::parse("mix(ori,back)", s).is_ok());
        assert!(StrategySpec::parse("warp(back)", s).is_err());
        assert!(StrategySpec::parse("stack(back", s).is_err());
    }

    #[test]
    fn back_translate_hit_miss_empty() {
        let table = ParaphraseTable::from_pairs([("good movie", "great film")]);
        let vocab = build_vocab_from_texts(["good movie great film"], 1, 100);
        let hit = back_translate(&example("Good  movie", &vocab), &table, &vocab);
        assert_eq!(hit.augmented_tokens.unwrap(), tokenize("great film", &vocab));
        assert_eq!(hit.provenance, vec!["back"]);
        let ex = example("bad movie", &vocab);
        let miss = back_translate(&ex, &table, &vocab);
        assert_eq!(miss.augmented_tokens.as_ref(), Some(&ex.tokens));
        assert_eq!(table.misses(), 1);
        let empty = example("", &vocab);
        assert_eq!(back_translate(&empty, &table, &vocab).augmented_tokens, Some(empty.tokens.clone()));
        assert_eq!(table.misses(), 1);
        assert_eq!(miss.label, ex.label);
    }

    #[test]
    fn word_replace_cases() {
        let vocab = build_vocab_from_texts(["a b c d e f a b"], 1, 100);
        let ex = example("a b c d e f", &vocab);
        assert_eq!(word_replace(&ex, &vocab, 0.0, &mut rng(1)).augmented_tokens.unwrap(), ex.tokens);
        let a = word_replace(&ex, &vocab, 0.5, &mut rng(9));
        let b = word_replace(&ex, &vocab, 0.5, &mut rng(9));
        assert_eq!(a, b);
        assert_eq!(a.label, ex.label);

        let single = build_vocab_from_texts(["t"], 1, 100);
        let t = single.id("t").unwrap();
        let mut ex = example("t t t", &single);
        ex.tokens.ids = vec![t, t, t];
        let out = word_replace(&ex, &single, 1.0, &mut rng(3)).augmented_tokens.unwrap();
        assert!(out.ids.iter().all(|&id| id == t));
        // unknown tokens are reserved and stay put
        let unk = example("zzz", &single);
        assert_eq!(word_replace(&unk, &single, 1.0, &mut rng(3)).augmented_tokens.unwrap(), unk.tokens);
    }

    #[test]
    fn cutoff_window_arithmetic() {
        assert_eq!(cutoff_width(0.0, 10), 0);
        assert_eq!(cutoff_width(0.2, 10), 2);
        assert_eq!(cutoff_width(0.5, 1), 1);
        assert_eq!(cutoff_width(0.1, 30), 3);

        let e = slice(&(0..20).map(|v| v as f64 + 1.0).collect::<Vec<_>>(), 2);
        let mut s = e.clone();
        cutoff_slice(&mut s, 0.0, &mut rng(1));
        assert_eq!(s, e);
        let mut s = e.clone();
        cutoff_slice(&mut s, 0.2, &mut rng(4));
        let zeroed: Vec<usize> = (0..10).filter(|&t| s.mask[t] == 0.0).collect();
        assert_eq!(zeroed.len(), 2);
        assert_eq!(zeroed[1], zeroed[0] + 1);
        for &t in &zeroed {
            assert!(s.position(t).iter().all(|&v| v == 0.0));
        }
        let mut one = slice(&[3.0, 4.0], 2);
        cutoff_slice(&mut one, 0.5, &mut rng(2));
        assert_eq!(one.mask, vec![0.0]);
        assert_eq!(one.values, vec![0.0, 0.0]);
    }

    #[test]
    fn cutoff_leaves_padding_alone() {
        let p = init_params(
            ModelDims { vocab_size: 30, d_emb: 4, d_hid: 5, d_proj: 3, num_classes: 2 },
            1,
        )
        .unwrap();
        let toks = vec![
            TokenSequence { ids: vec![4, 5], source_text: String::new() },
            TokenSequence { ids: (4..14).collect(), source_text: String::new() },
        ];
        let b = embed(&p, &toks).unwrap();
        let c = cutoff(&b, 0.2, &mut rng(5)).unwrap();
        assert_eq!(&c.mask[2..10], &[0.0; 8]);
        assert_eq!(c.mask[..2].iter().filter(|&&m| m == 0.0).count(), 1);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let (ei, ej) = (slice(&[2.0], 1), slice(&[4.0], 1));
        let (yi, yj) = ([1.0, 0.0], [0.0, 1.0]);
        let (e, y) = mixup_with(&ei, &ej, &yi, &yj, 1.0).unwrap();
        assert_eq!((e.values, y), (vec![2.0], vec![1.0, 0.0]));
        let (e, y) = mixup_with(&ei, &ej, &yi, &yj, 0.0).unwrap();
        assert_eq!((e.values, y), (vec![4.0], vec![0.0, 1.0]));
        let (e, y) = mixup_with(&ei, &ej, &yi, &yj, 0.5).unwrap();
        assert_eq!((e.values, y), (vec![3.0], vec![0.5, 0.5]));
        assert!(mixup_with(&ei, &slice(&[1.0, 2.0], 2), &yi, &yj, 0.5).is_err());
        assert!(mixup_with(&ei, &ej, &yi, &[1.0], 0.5).is_err());
        let (_, y) = mixup(&ei, &ej, &yi, &yj, 1.0, &mut rng(3)).unwrap();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_perturbation_cases() {
        let e = slice(&[0.0, 0.0], 2);
        let out = adversarial_perturb(&e, &[3.0, 4.0], 0.1).unwrap();
        assert!((out.values[0] - 0.06).abs() < 1e-15);
        assert!((out.values[1] - 0.08).abs() < 1e-15);
        assert!((l2_norm(&out.values) - 0.1).abs() < 1e-12);
        let same = adversarial_perturb(&slice(&[1.0, 2.0], 2), &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(same.values, vec![1.0, 2.0]);
        assert!(adversarial_perturb(&e, &[f64::NAN, 0.0], 0.1).is_err());
        assert!(adversarial_perturb(&e, &[1.0, 0.0], 0.0).is_err());

        let mut padded = slice(&[1.0, 1.0, 0.0, 0.0], 2);
        padded.mask = vec![1.0, 0.0];
        let out = adversarial_perturb(&padded, &[1.0, 0.0, 5.0, 5.0], 0.5).unwrap();
        assert_eq!(&out.values[2..], &[0.0, 0.0]);
        assert_eq!(&out.values[..2], &[1.5, 1.0]);
    }

    struct Fixed(Vec<f64>);
    impl GradientOracle for Fixed {
        fn input_gradient(&mut self, _: &EmbeddingBatch, _: &[Vec<f64>]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn multi_step_adversarial_stays_on_sphere() {
        let b = EmbeddingBatch::from_slices(vec![slice(&[1.0, 0.0, 0.0, 1.0], 2)], 2).unwrap();
        let mut oracle = Fixed(vec![0.3, -0.2, 0.9, 0.1]);
        let out = adversarial_batch(&b, &[vec![1.0]], &mut oracle, 0.7, 3).unwrap();
        let delta: Vec<f64> = out.values.iter().zip(&b.values).map(|(a, c)| a - c).collect();
        assert!((l2_norm(&delta) - 0.7).abs() < 1e-12);
    }

    fn toy() -> (Vocabulary, ParaphraseTable, Vec<LabeledExample>) {
        let vocab = build_vocab_from_texts(["good movie great film bad plot awful story fine"], 1, 100);
        let table = ParaphraseTable::from_pairs([("good movie", "great film"), ("bad plot", "awful story")]);
        let ex = vec![
            example("good movie", &vocab),
            example("bad plot", &vocab),
            example("fine", &vocab),
        ];
        (vocab, table, ex)
    }

    fn run(spec: &StrategySpec, seed: u64) -> Vec<AugmentedPair> {
        let (vocab, table, ex) = toy();
        let p = init_params(
            ModelDims { vocab_size: vocab.len(), d_emb: 4, d_hid: 5, d_proj: 3, num_classes: 2 },
            1,
        )
        .unwrap();
        let sampler = UnigramSampler::new(&vocab);
        let mut oracle = CrossEntropyOracle::eval(&p);
        let mut ctx = AugmentContext {
            vocab: &vocab,
            table: &table,
            sampler: &sampler,
            embed_table: &p.embed,
            oracle: &mut oracle,
        };
        apply_strategy(spec, &ex, &mut ctx, &mut rng(seed)).unwrap()
    }

    #[test]
    fn stack_back_adv_provenance_and_embeddings() {
        let spec = StrategySpec::parse("stack(back,adv)", AugmentSettings::default()).unwrap();
        let out = run(&spec, 1);
        assert_eq!(out.len(), 3);
        for pair in &out {
            assert_eq!(pair.provenance, vec!["back", "adv"]);
            assert!(pair.augmented_embeddings.is_some() && pair.augmented_tokens.is_none());
            assert_eq!(pair.label, pair.original.label);
        }
    }

    #[test]
    fn random_picks_one_transform_per_batch() {
        let spec = StrategySpec::parse("random(back,cutoff,adv)", AugmentSettings::default()).unwrap();
        for seed in 0..10 {
            let out = run(&spec, seed);
            let first = &out[0].provenance;
            assert_eq!(first.len(), 1);
            assert!(out.iter().all(|p| &p.provenance == first));
            assert_eq!(out, run(&spec, seed));
        }
    }

    #[test]
    fn stack_of_one_equals_single() {
        for t in ["back", "replace", "cutoff", "mixup", "adv"] {
            let single = StrategySpec::parse(t, AugmentSettings::default()).unwrap();
            let stack = StrategySpec::parse(&format!("stack({t})"), AugmentSettings::default()).unwrap();
            assert_eq!(run(&single, 5), run(&stack, 5), "{t}");
        }
    }

    #[test]
    fn mix_combine_keeps_label_and_records_both_operands() {
        let spec = StrategySpec::parse("mix(ori,back)", AugmentSettings::default()).unwrap();
        let out = run(&spec, 2);
        assert_eq!(out[0].provenance, vec!["mix", "ori", "back"]);
        for p in &out {
            assert_eq!(p.label, p.original.label);
            assert!(p.augmented_embeddings.is_some());
        }
    }

    #[test]
    fn single_mixup_interpolates_neighbouring_labels() {
        let (vocab, _, _) = toy();
        let mut ex0 = example("good movie", &vocab);
        ex0.label = vec![1.0, 0.0];
        let ex1 = example("bad plot", &vocab);
        let table = ParaphraseTable::default();
        let p = init_params(
            ModelDims { vocab_size: vocab.len(), d_emb: 4, d_hid: 5, d_proj: 3, num_classes: 2 },
            1,
        )
        .unwrap();
        let sampler = UnigramSampler::new(&vocab);
        let mut oracle = CrossEntropyOracle::eval(&p);
        let mut ctx = AugmentContext {
            vocab: &vocab,
            table: &table,
            sampler: &sampler,
            embed_table: &p.embed,
            oracle: &mut oracle,
        };
        let spec = StrategySpec::single(Transform::Mixup);
        let out = apply_strategy(&spec, &[ex0, ex1], &mut ctx, &mut rng(4)).unwrap();
        let y0 = &out[0].label;
        let y1 = &out[1].label;
        // example 0 mixes with 1 and vice versa, with independent coefficients
        assert!((y0[0] + y0[1] - 1.0).abs() < 1e-12);
        assert!((y1[0] + y1[1] - 1.0).abs() < 1e-12);
        assert!(y0[0] > 0.0 && y1[0] < 1.0);
    }
}
