//! A small differentiable text classifier.
//!
//! Embedding lookup, masked mean pooling, two `affine → tanh → dropout` layers,
//! then a classifier head and an L2-normalized projection head. Gradients are
//! computed by hand in reverse mode, including the gradient with respect to
//! the input embeddings.
//!
//! Every position of an [`EmbeddingBatch`] remembers how its value was built:
//! a linear combination of embedding-table rows plus a constant offset. That
//! lets embedding-level augmentations (cutoff, mixup, adversarial offsets) be
//! differentiated back into the embedding table exactly.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, PAD};
use crate::error::{CodaError, Result};
use crate::rng::{derive_rng, stream};
use crate::tensor::{l2_norm, Matrix};

/// Projections with a pre-normalization norm below this are flagged as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_proj: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab_size,
            self.d_emb,
            self.d_hid,
            self.d_proj,
            self.num_classes,
        ];
        if all.contains(&0) {
            return Err(CodaError::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

pub const TENSOR_NAMES: [&str; 9] = [
    "embed", "enc_w1", "enc_b1", "enc_w2", "enc_b2", "cls_w", "cls_b", "proj_w", "proj_b",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: Matrix,
    pub enc_w1: Matrix,
    pub enc_b1: Matrix,
    pub enc_w2: Matrix,
    pub enc_b2: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
    pub proj_w: Matrix,
    pub proj_b: Matrix,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            vocab_size,
            d_emb,
            d_hid,
            d_proj,
            num_classes,
        } = dims;
        Self {
            embed: Matrix::zeros(vocab_size, d_emb),
            enc_w1: Matrix::zeros(d_emb, d_hid),
            enc_b1: Matrix::zeros(1, d_hid),
            enc_w2: Matrix::zeros(d_hid, d_hid),
            enc_b2: Matrix::zeros(1, d_hid),
            cls_w: Matrix::zeros(d_hid, num_classes),
            cls_b: Matrix::zeros(1, num_classes),
            proj_w: Matrix::zeros(d_hid, d_proj),
            proj_b: Matrix::zeros(1, d_proj),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.embed.rows,
            d_emb: self.embed.cols,
            d_hid: self.enc_w1.cols,
            d_proj: self.proj_w.cols,
            num_classes: self.cls_w.cols,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Named tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("embed", &self.embed),
            ("enc_w1", &self.enc_w1),
            ("enc_b1", &self.enc_b1),
            ("enc_w2", &self.enc_w2),
            ("enc_b2", &self.enc_b2),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 9] {
        [
            ("embed", &mut self.embed),
            ("enc_w1", &mut self.enc_w1),
            ("enc_b1", &mut self.enc_b1),
            ("enc_w2", &mut self.enc_w2),
            ("enc_b2", &mut self.enc_b2),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
        ]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|((_, a), (_, b))| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// Seeded uniform initialization scaled by `1/sqrt(fan_in)`; biases zero.
///
/// Embedding rows are looked up by a one-hot input, so their fan-in is 1 and
/// they are drawn from `U(-1, 1)`. The PAD row is zero.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let mut p = ModelParams::zeros(dims);
    let fill = |m: &mut Matrix, fan_in: usize, rng: &mut crate::rng::CodaRng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in m.data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    };
    fill(&mut p.embed, 1, &mut rng);
    p.embed.row_mut(PAD as usize).fill(0.0);
    fill(&mut p.enc_w1, dims.d_emb, &mut rng);
    fill(&mut p.enc_w2, dims.d_hid, &mut rng);
    fill(&mut p.cls_w, dims.d_hid, &mut rng);
    fill(&mut p.proj_w, dims.d_hid, &mut rng);
    Ok(p)
}

/// Linear provenance of one embedding position: `Σ coef · embed[id]`.
pub type RowSources = Vec<(u32, f64)>;

/// One example's embedding sequence, `len × d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSlice {
    pub d_emb: usize,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
    pub sources: Vec<RowSources>,
    pub offset: Vec<f64>,
}

impl EmbeddingSlice {
    pub fn empty(d_emb: usize) -> Self {
        Self {
            d_emb,
            values: Vec::new(),
            mask: Vec::new(),
            sources: Vec::new(),
            offset: Vec::new(),
        }
    }

    pub fn from_tokens(embed: &Matrix, tokens: &TokenSequence) -> Result<Self> {
        let d = embed.cols;
        let mut s = Self::empty(d);
        for &id in &tokens.ids {
            if id as usize >= embed.rows {
                return Err(CodaError::TokenOutOfRange {
                    id,
                    vocab_size: embed.rows,
                });
            }
            if id == PAD {
                s.values.extend(std::iter::repeat_n(0.0, d));
                s.mask.push(0.0);
                s.sources.push(Vec::new());
            } else {
                s.values.extend_from_slice(embed.row(id as usize));
                s.mask.push(1.0);
                s.sources.push(vec![(id, 1.0)]);
            }
            s.offset.extend(std::iter::repeat_n(0.0, d));
        }
        Ok(s)
    }

    /// Number of positions (including padding).
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of positions with mask 1.
    pub fn true_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn position(&self, t: usize) -> &[f64] {
        &self.values[t * self.d_emb..(t + 1) * self.d_emb]
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.len() < len {
            self.values.extend(std::iter::repeat_n(0.0, self.d_emb));
            self.offset.extend(std::iter::repeat_n(0.0, self.d_emb));
            self.mask.push(0.0);
            self.sources.push(Vec::new());
        }
    }

    /// Zeroes the value at position `t` and masks it out.
    pub fn zero_position(&mut self, t: usize) {
        let d = self.d_emb;
        self.values[t * d..(t + 1) * d].fill(0.0);
        self.offset[t * d..(t + 1) * d].fill(0.0);
        self.sources[t].clear();
        self.mask[t] = 0.0;
    }

    /// Adds a constant perturbation (`len × d_emb`).
    pub fn add_offset(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        for ((v, o), &d) in self.values.iter_mut().zip(self.offset.iter_mut()).zip(delta) {
            *v += d;
            *o += d;
        }
    }

    /// `a·self + (1−a)·other`, both padded to a common length; mask is the union.
    pub fn interpolate(&self, other: &EmbeddingSlice, a: f64) -> Result<EmbeddingSlice> {
        if self.d_emb != other.d_emb {
            return Err(CodaError::Shape(format!(
                "mixup of d_emb {} with d_emb {}",
                self.d_emb, other.d_emb
            )));
        }
        let len = self.len().max(other.len());
        let (mut x, mut y) = (self.clone(), other.clone());
        x.pad_to(len);
        y.pad_to(len);
        let b = 1.0 - a;
        let lerp = |p: &[f64], q: &[f64]| -> Vec<f64> {
            p.iter().zip(q).map(|(u, v)| a * u + b * v).collect()
        };
        let sources = x
            .sources
            .iter()
            .zip(&y.sources)
            .map(|(sx, sy)| {
                let mut out: RowSources = Vec::with_capacity(sx.len() + sy.len());
                out.extend(sx.iter().map(|&(id, c)| (id, a * c)));
                out.extend(sy.iter().map(|&(id, c)| (id, b * c)));
                out
            })
            .collect();
        Ok(EmbeddingSlice {
            d_emb: x.d_emb,
            values: lerp(&x.values, &y.values),
            mask: x
                .mask
                .iter()
                .zip(&y.mask)
                .map(|(&m, &n)| if m != 0.0 || n != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            sources,
            offset: lerp(&x.offset, &y.offset),
        })
    }
}

/// A padded batch of embedding sequences, `batch × max_len × d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub batch: usize,
    pub max_len: usize,
    pub d_emb: usize,
    /// `batch × max_len × d_emb`, row-major.
    pub values: Vec<f64>,
    /// `batch × max_len` of {0, 1}.
    pub mask: Vec<f64>,
    sources: Vec<RowSources>,
    offset: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn from_slices(slices: Vec<EmbeddingSlice>, d_emb: usize) -> Result<Self> {
        let batch = slices.len();
        let max_len = slices.iter().map(EmbeddingSlice::len).max().unwrap_or(0);
        let mut out = Self {
            batch,
            max_len,
            d_emb,
            values: Vec::with_capacity(batch * max_len * d_emb),
            mask: Vec::with_capacity(batch * max_len),
            sources: Vec::with_capacity(batch * max_len),
            offset: Vec::with_capacity(batch * max_len * d_emb),
        };
        for mut s in slices {
            if s.d_emb != d_emb {
                return Err(CodaError::Shape(format!(
                    "slice d_emb {} in a batch of d_emb {d_emb}",
                    s.d_emb
                )));
            }
            s.pad_to(max_len);
            out.values.extend_from_slice(&s.values);
            out.mask.extend_from_slice(&s.mask);
            out.sources.extend(s.sources);
            out.offset.extend_from_slice(&s.offset);
        }
        Ok(out)
    }

    pub fn example(&self, i: usize) -> EmbeddingSlice {
        let (l, d) = (self.max_len, self.d_emb);
        EmbeddingSlice {
            d_emb: d,
            values: self.values[i * l * d..(i + 1) * l * d].to_vec(),
            mask: self.mask[i * l..(i + 1) * l].to_vec(),
            sources: self.sources[i * l..(i + 1) * l].to_vec(),
            offset: self.offset[i * l * d..(i + 1) * l * d].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<EmbeddingSlice> {
        (0..self.batch).map(|i| self.example(i)).collect()
    }

    #[inline]
    pub fn mask_at(&self, b: usize, t: usize) -> f64 {
        self.mask[b * self.max_len + t]
    }

    #[inline]
    pub fn position(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.max_len + t) * self.d_emb;
        &self.values[start..start + self.d_emb]
    }

    /// Recomputes every value from its row provenance against `embed`.
    pub fn rematerialize(&self, embed: &Matrix) -> Self {
        let mut out = self.clone();
        let d = self.d_emb;
        for (p, src) in self.sources.iter().enumerate() {
            let v = &mut out.values[p * d..(p + 1) * d];
            v.copy_from_slice(&self.offset[p * d..(p + 1) * d]);
            for &(id, c) in src {
                for (x, e) in v.iter_mut().zip(embed.row(id as usize)) {
                    *x += c * e;
                }
            }
        }
        out
    }

    /// Scatters an input gradient back onto embedding-table rows.
    pub fn scatter_into(&self, input_grad: &[f64], embed_grad: &mut Matrix) {
        let d = self.d_emb;
        for (p, src) in self.sources.iter().enumerate() {
            if src.is_empty() {
                continue;
            }
            let g = &input_grad[p * d..(p + 1) * d];
            for &(id, c) in src {
                if id == PAD {
                    continue;
                }
                for (e, gi) in embed_grad.row_mut(id as usize).iter_mut().zip(g) {
                    *e += c * gi;
                }
            }
        }
    }
}

/// Row lookup with padding to the longest sequence.
pub fn embed(params: &ModelParams, tokens: &[TokenSequence]) -> Result<EmbeddingBatch> {
    let slices = tokens
        .iter()
        .map(|t| EmbeddingSlice::from_tokens(&params.embed, t))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBatch::from_slices(slices, params.embed.cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep/drop indicators for both dropout sites, `batch × d_hid` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub rate: f64,
    pub site1: Matrix,
    pub site2: Matrix,
}

impl DropoutMasks {
    pub fn sample(batch: usize, d_hid: usize, rate: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || {
            let mut m = Matrix::zeros(batch, d_hid);
            for v in m.data.iter_mut() {
                *v = if rng.random::<f64>() >= rate { 1.0 } else { 0.0 };
            }
            m
        };
        let site1 = draw();
        let site2 = draw();
        Self { rate, site1, site2 }
    }

    fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: EmbeddingBatch,
    pub counts: Vec<f64>,
    pub mean: Matrix,
    pub h1: Matrix,
    pub a1: Matrix,
    pub h2: Matrix,
    pub nonempty: Vec<bool>,
    pub pooled: Matrix,
    pub masks: Option<Arc<DropoutMasks>>,
}

impl ForwardCache {
    pub fn masks(&self) -> Option<&Arc<DropoutMasks>> {
        self.masks.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub pooled: Matrix,
    pub cache: ForwardCache,
}

/// Where the dropout masks of a train-mode forward come from.
pub enum Dropout<'a, R: Rng> {
    /// Eval mode: dropout is the identity.
    Off,
    Fresh { rate: f64, rng: &'a mut R },
    Reuse(Arc<DropoutMasks>),
}

impl<'a> Dropout<'a, crate::rng::CodaRng> {
    pub fn off() -> Self {
        Dropout::Off
    }

    pub fn reuse(masks: &Arc<DropoutMasks>) -> Self {
        Dropout::Reuse(Arc::clone(masks))
    }
}

fn apply_mask(x: &Matrix, masks: Option<(&Matrix, f64)>) -> Matrix {
    match masks {
        None => x.clone(),
        Some((m, s)) => {
            let mut out = x.clone();
            for (o, &k) in out.data.iter_mut().zip(&m.data) {
                *o *= k * s;
            }
            out
        }
    }
}

pub fn forward<R: Rng>(
    params: &ModelParams,
    batch: &EmbeddingBatch,
    dropout: Dropout<'_, R>,
) -> Result<ForwardOutput> {
    let dims = params.dims();
    if batch.d_emb != dims.d_emb {
        return Err(CodaError::Shape(format!(
            "batch d_emb {} vs model d_emb {}",
            batch.d_emb, dims.d_emb
        )));
    }
    let masks = match dropout {
        Dropout::Off => None,
        Dropout::Fresh { rate, rng } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(CodaError::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
            Some(Arc::new(DropoutMasks::sample(batch.batch, dims.d_hid, rate, rng)))
        }
        Dropout::Reuse(m) => {
            if m.site1.rows != batch.batch || m.site1.cols != dims.d_hid {
                return Err(CodaError::Shape(format!(
                    "reused dropout masks are {}x{}, batch needs {}x{}",
                    m.site1.rows, m.site1.cols, batch.batch, dims.d_hid
                )));
            }
            Some(m)
        }
    };

    let (b, l, d) = (batch.batch, batch.max_len, batch.d_emb);
    let mut mean = Matrix::zeros(b, d);
    let mut counts = vec![0.0; b];
    for i in 0..b {
        let row = mean.row_mut(i);
        for t in 0..l {
            let m = batch.mask_at(i, t);
            if m == 0.0 {
                continue;
            }
            counts[i] += m;
            for (r, v) in row.iter_mut().zip(batch.position(i, t)) {
                *r += m * v;
            }
        }
        if counts[i] > 0.0 {
            let inv = 1.0 / counts[i];
            row.iter_mut().for_each(|r| *r *= inv);
        }
    }
    let nonempty: Vec<bool> = counts.iter().map(|&c| c > 0.0).collect();

    let site = |which: u8| {
        masks
            .as_ref()
            .map(|m| (if which == 1 { &m.site1 } else { &m.site2 }, m.scale()))
    };
    let mut h1 = mean.affine(&params.enc_w1, &params.enc_b1);
    h1.data.iter_mut().for_each(|v| *v = v.tanh());
    let a1 = apply_mask(&h1, site(1));
    let mut h2 = a1.affine(&params.enc_w2, &params.enc_b2);
    h2.data.iter_mut().for_each(|v| *v = v.tanh());
    let mut pooled = apply_mask(&h2, site(2));
    for (i, &ne) in nonempty.iter().enumerate() {
        if !ne {
            pooled.row_mut(i).fill(0.0);
        }
    }
    let logits = pooled.affine(&params.cls_w, &params.cls_b);

    Ok(ForwardOutput {
        logits,
        pooled: pooled.clone(),
        cache: ForwardCache {
            batch: batch.clone(),
            counts,
            mean,
            h1,
            a1,
            h2,
            nonempty,
            pooled,
            masks,
        },
    })
}

/// Unit-norm projections of pooled vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub unit: Matrix,
    pub norms: Vec<f64>,
    /// Rows that map to the zero vector and must be excluded from contrastive terms.
    pub flagged: Vec<bool>,
}

pub fn project(params: &ModelParams, pooled: &Matrix) -> Projection {
    let raw = pooled.affine(&params.proj_w, &params.proj_b);
    let mut unit = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows);
    let mut flagged = Vec::with_capacity(raw.rows);
    for i in 0..raw.rows {
        let zero_input = pooled.row(i).iter().all(|&v| v == 0.0);
        let n = l2_norm(raw.row(i));
        let flag = zero_input || n < ZERO_NORM;
        let row = unit.row_mut(i);
        if flag {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
        flagged.push(flag);
    }
    Projection {
        unit,
        norms,
        flagged,
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Gradients for every parameter tensor plus the input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: ModelParams,
    /// `batch × max_len × d_emb`; zero at masked positions.
    pub input_grad: Vec<f64>,
}

/// Upstream gradient of a scalar loss.
#[derive(Default)]
pub struct Upstream<'a> {
    /// d loss / d logits, `batch × num_classes`.
    pub logits: Option<&'a Matrix>,
    /// d loss / d unit projection, with the projection it refers to.
    pub projection: Option<(&'a Projection, &'a Matrix)>,
}

pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: Upstream<'_>) -> Result<GradientSet> {
    let dims = params.dims();
    let b = cache.batch.batch;
    if cache.pooled.rows != b || cache.pooled.cols != dims.d_hid {
        return Err(CodaError::Shape("forward cache does not match model".into()));
    }
    let mut grads = params.zeros_like();
    let mut dpooled = Matrix::zeros(b, dims.d_hid);

    if let Some(dlogits) = upstream.logits {
        if dlogits.rows != b || dlogits.cols != dims.num_classes {
            return Err(CodaError::Shape(format!(
                "logit gradient is {}x{}, cache holds batch {b} with {} classes",
                dlogits.rows, dlogits.cols, dims.num_classes
            )));
        }
        let d = cache
            .pooled
            .affine_backward(&params.cls_w, dlogits, &mut grads.cls_w, &mut grads.cls_b);
        dpooled.add_assign(&d);
    }

    if let Some((proj, dunit)) = upstream.projection {
        if dunit.rows != b || dunit.cols != dims.d_proj || proj.unit.rows != b {
            return Err(CodaError::Shape("projection gradient does not match cache".into()));
        }
        let mut draw = Matrix::zeros(b, dims.d_proj);
        for i in 0..b {
            if proj.flagged[i] {
                continue;
            }
            let u = proj.unit.row(i);
            let du = dunit.row(i);
            let ud: f64 = u.iter().zip(du).map(|(a, c)| a * c).sum();
            let inv = 1.0 / proj.norms[i];
            for ((r, &ui), &dui) in draw.row_mut(i).iter_mut().zip(u).zip(du) {
                *r = (dui - ui * ud) * inv;
            }
        }
        let d = cache
            .pooled
            .affine_backward(&params.proj_w, &draw, &mut grads.proj_w, &mut grads.proj_b);
        dpooled.add_assign(&d);
    }

    for (i, &ne) in cache.nonempty.iter().enumerate() {
        if !ne {
            dpooled.row_mut(i).fill(0.0);
        }
    }

    let site = |which: u8| {
        cache
            .masks
            .as_ref()
            .map(|m| (if which == 1 { &m.site1 } else { &m.site2 }, m.scale()))
    };
    let mut dz2 = apply_mask(&dpooled, site(2));
    for (g, h) in dz2.data.iter_mut().zip(&cache.h2.data) {
        *g *= 1.0 - h * h;
    }
    let da1 = cache
        .a1
        .affine_backward(&params.enc_w2, &dz2, &mut grads.enc_w2, &mut grads.enc_b2);
    let mut dz1 = apply_mask(&da1, site(1));
    for (g, h) in dz1.data.iter_mut().zip(&cache.h1.data) {
        *g *= 1.0 - h * h;
    }
    let dmean = cache
        .mean
        .affine_backward(&params.enc_w1, &dz1, &mut grads.enc_w1, &mut grads.enc_b1);

    let batch = &cache.batch;
    let (l, d) = (batch.max_len, batch.d_emb);
    let mut input_grad = vec![0.0; b * l * d];
    for i in 0..b {
        if cache.counts[i] == 0.0 {
            continue;
        }
        let inv = 1.0 / cache.counts[i];
        let g = dmean.row(i);
        for t in 0..l {
            let m = batch.mask_at(i, t);
            if m == 0.0 {
                continue;
            }
            let start = (i * l + t) * d;
            for (o, &gi) in input_grad[start..start + d].iter_mut().zip(g) {
                *o = m * gi * inv;
            }
        }
    }
    batch.scatter_into(&input_grad, &mut grads.embed);

    Ok(GradientSet {
        params: grads,
        input_grad,
    })
}
