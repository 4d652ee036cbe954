//! Multi-kernel MMD between original and transformed representations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_strategy, AugmentContext, CrossEntropyOracle, StrategySpec};
use crate::corpus::{LabeledDataset, LabeledExample, TokenSequence};
use crate::encoder::{embed, forward, Dropout, EmbeddingBatch, EmbeddingSlice, ModelParams};
use crate::error::{CodaError, Result};
use crate::rng::{derive_rng, stream};
use crate::tensor::Matrix;
use crate::trainer::Resources;

/// Sum of RBF kernels `exp(−‖x−y‖² / (2σ²))` over `bandwidths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

pub const DEFAULT_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl KernelSpec {
    pub fn rbf(bandwidths: Vec<f64>) -> Result<Self> {
        let spec = Self { bandwidths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CodaError::Config(format!(
                "kernel bandwidths must be a non-empty list of positive numbers, got {:?}",
                self.bandwidths
            )));
        }
        Ok(())
    }

    /// Median pairwise distance of `x` times each of `scales`.
    pub fn median_heuristic(x: &Matrix, scales: &[f64]) -> Result<Self> {
        let mut d = Vec::with_capacity(x.rows * x.rows.saturating_sub(1) / 2);
        for i in 0..x.rows {
            for j in i + 1..x.rows {
                d.push(sq_dist(x.row(i), x.row(j)).sqrt());
            }
        }
        d.retain(|&v| v > 0.0);
        let median = if d.is_empty() {
            1.0
        } else {
            d.sort_by(f64::total_cmp);
            d[d.len() / 2]
        };
        Self::rbf(scales.iter().map(|s| s * median).collect())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2 = sq_dist(x, y);
        self.bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// V-statistic: includes the diagonal, always ≥ 0 up to rounding.
    #[default]
    Biased,
    /// U-statistic: excludes the diagonal of the within-set sums.
    Unbiased,
}

/// Mean of `k(a_i, b_j)`, skipping `i == j` when `skip_diag`. Rows are reduced in order.
fn kernel_mean(a: &Matrix, b: &Matrix, k: &KernelSpec, skip_diag: bool) -> f64 {
    let row_sums: Vec<f64> = (0..a.rows)
        .into_par_iter()
        .map(|i| {
            (0..b.rows)
                .filter(|&j| !(skip_diag && i == j))
                .map(|j| k.eval(a.row(i), b.row(j)))
                .sum::<f64>()
        })
        .collect();
    let pairs = if skip_diag { a.rows * (b.rows - 1) } else { a.rows * b.rows };
    row_sums.iter().sum::<f64>() / pairs as f64
}

fn canonical_cmp(a: &Matrix, b: &Matrix) -> std::cmp::Ordering {
    a.rows.cmp(&b.rows).then_with(|| {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Squared MMD between the row sets `x` and `y`.
pub fn mmd2(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<f64> {
    mmd2_with(x, y, spec, Estimator::Biased)
}

pub fn mmd2_with(x: &Matrix, y: &Matrix, spec: &KernelSpec, estimator: Estimator) -> Result<f64> {
    spec.validate()?;
    if x.rows == 0 || y.rows == 0 {
        return Err(CodaError::Shape("mmd needs at least one vector per set".into()));
    }
    if x.cols != y.cols {
        return Err(CodaError::Shape(format!("mmd sets have dimensions {} and {}", x.cols, y.cols)));
    }
    // a canonical argument order makes the result exactly symmetric
    let (x, y) = if canonical_cmp(y, x).is_lt() { (y, x) } else { (x, y) };
    let unbiased = estimator == Estimator::Unbiased;
    if unbiased && (x.rows < 2 || y.rows < 2) {
        return Err(CodaError::Shape("unbiased mmd needs at least two vectors per set".into()));
    }
    let kxx = kernel_mean(x, x, spec, unbiased);
    let kyy = kernel_mean(y, y, spec, unbiased);
    let kxy = kernel_mean(x, y, spec, false);
    Ok(kxx + kyy - 2.0 * kxy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub strategy: String,
    pub mmd: f64,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversitySettings {
    /// Examples drawn (without replacement) from the dataset; 0 uses all of them.
    pub sample_size: usize,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub estimator: Estimator,
    /// Batch size used when applying strategies.
    pub batch_size: usize,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        Self {
            sample_size: 500,
            seed: 0,
            scales: DEFAULT_SCALES.to_vec(),
            estimator: Estimator::Biased,
            batch_size: 32,
        }
    }
}

fn pooled(params: &ModelParams, batch: &EmbeddingBatch) -> Result<Matrix> {
    Ok(forward(params, batch, Dropout::off())?.pooled)
}

fn stack_rows(parts: Vec<Matrix>, cols: usize) -> Matrix {
    let rows = parts.iter().map(|m| m.rows).sum();
    let data = parts.into_iter().flat_map(|m| m.data).collect();
    Matrix { rows, cols, data }
}

fn transformed_reps(
    spec: &StrategySpec,
    sample: &[LabeledExample],
    params: &ModelParams,
    res: Resources<'_>,
    settings: &DiversitySettings,
) -> Result<Matrix> {
    spec.validate()?;
    let mut parts = Vec::new();
    for (b, chunk) in sample.chunks(settings.batch_size.max(1)).enumerate() {
        let mut oracle = CrossEntropyOracle::eval(params);
        let mut ctx = AugmentContext {
            vocab: res.vocab,
            table: res.table,
            sampler: res.sampler,
            embed_table: &params.embed,
            oracle: &mut oracle,
        };
        let mut rng = derive_rng(settings.seed, &[stream::AUGMENT, b as u64]);
        let pairs = apply_strategy(spec, chunk, &mut ctx, &mut rng)?;
        let slices = pairs
            .into_iter()
            .map(|p| match (p.augmented_embeddings, p.augmented_tokens) {
                (Some(e), _) => Ok(e),
                (None, Some(t)) => EmbeddingSlice::from_tokens(&params.embed, &t),
                (None, None) => Err(CodaError::Strategy("transform produced no output".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        parts.push(pooled(params, &EmbeddingBatch::from_slices(slices, params.embed.cols)?)?);
    }
    Ok(stack_rows(parts, params.dims().d_hid))
}

/// Seeded sample of `n` examples (all when `n` is 0 or exceeds the set), in dataset order.
pub fn sample_examples(dataset: &LabeledDataset, n: usize, seed: u64) -> Vec<LabeledExample> {
    use rand::seq::index::sample;
    if n == 0 || n >= dataset.len() {
        return dataset.examples.clone();
    }
    let mut idx = sample(&mut derive_rng(seed, &[stream::SUBSAMPLE]), dataset.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| dataset.examples[i].clone()).collect()
}

/// MMD between pooled representations of original and transformed examples, one row per
/// strategy, sorted by descending MMD. Failing strategies are reported last with their error.
pub fn diversity_report(
    dataset: &LabeledDataset,
    strategies: &[StrategySpec],
    params: &ModelParams,
    res: Resources<'_>,
    settings: &DiversitySettings,
) -> Result<Vec<DiversityRow>> {
    let sample = sample_examples(dataset, settings.sample_size, settings.seed);
    if sample.is_empty() {
        return Err(CodaError::Config("diversity report needs a non-empty dataset".into()));
    }
    let mut originals = Vec::new();
    for chunk in sample.chunks(settings.batch_size.max(1)) {
        let tokens: Vec<TokenSequence> = chunk.iter().map(|e| e.tokens.clone()).collect();
        originals.push(pooled(params, &embed(params, &tokens)?)?);
    }
    let x = stack_rows(originals, params.dims().d_hid);
    let kernel = KernelSpec::median_heuristic(&x, &settings.scales)?;

    let mut rows: Vec<DiversityRow> = strategies
        .iter()
        .map(|spec| {
            let result = transformed_reps(spec, &sample, params, res, settings)
                .and_then(|y| mmd2_with(&x, &y, &kernel, settings.estimator));
            match result {
                Ok(mmd) => DiversityRow {
                    strategy: spec.name(),
                    mmd,
                    sample_count: sample.len(),
                    error: None,
                },
                Err(e) => DiversityRow {
                    strategy: spec.name(),
                    mmd: f64::NAN,
                    sample_count: sample.len(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.error.is_some(), b.error.is_some()) {
        (false, false) => b.mmd.total_cmp(&a.mmd),
        (x, y) => x.cmp(&y),
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn one_dimensional_case() {
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let v = mmd2(&m(&[&[0.0]]), &m(&[&[1.0]]), &k).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 0.786_939).abs() < 1e-6);
    }

    #[test]
    fn identical_sets_and_translation() {
        let k = KernelSpec::rbf(vec![0.5, 2.0]).unwrap();
        let x = m(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert!(mmd2(&x, &x, &k).unwrap().abs() < 1e-12);
        let y = m(&[&[1.0, 1.0], &[0.0, 3.0]]);
        let shift = |a: &Matrix| {
            let mut b = a.clone();
            b.data.iter_mut().enumerate().for_each(|(i, v)| *v += if i % 2 == 0 { 3.0 } else { -7.0 });
            b
        };
        let a = mmd2(&x, &y, &k).unwrap();
        let b = mmd2(&shift(&x), &shift(&y), &k).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        assert!(mmd2(&m(&[&[0.0]]), &m(&[&[1.0, 2.0]]), &k).is_err());
        assert!(KernelSpec::rbf(vec![]).is_err());
        assert!(KernelSpec::rbf(vec![0.0]).is_err());
        assert!(mmd2_with(&m(&[&[0.0]]), &m(&[&[1.0]]), &k, Estimator::Unbiased).is_err());
    }

    #[test]
    fn unbiased_matches_hand_sum() {
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let x = m(&[&[0.0], &[1.0]]);
        let y = m(&[&[2.0], &[4.0]]);
        let kf = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();
        let expected = kf(0.0, 1.0) + kf(2.0, 4.0)
            - 2.0 * (kf(0.0, 2.0) + kf(0.0, 4.0) + kf(1.0, 2.0) + kf(1.0, 4.0)) / 4.0;
        let v = mmd2_with(&x, &y, &k, Estimator::Unbiased).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_scales() {
        let x = m(&[&[0.0], &[1.0], &[3.0]]);
        let k = KernelSpec::median_heuristic(&x, &[0.5, 1.0]).unwrap();
        assert_eq!(k.bandwidths, vec![1.0, 2.0]);
        let same = m(&[&[1.0], &[1.0]]);
        assert_eq!(KernelSpec::median_heuristic(&same, &[1.0]).unwrap().bandwidths, vec![1.0]);
    }
}
