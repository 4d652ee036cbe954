//! Memory bank of past keys and the momentum key encoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::encoder::{embed, forward, project, Dropout, ModelParams, Projection};
use crate::error::{CodaError, Result};
use crate::tensor::l2_norm;

const UNIT_TOL: f64 = 1e-6;

/// Bounded FIFO of unit-norm keys; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    count: usize,
    head: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(CodaError::Config(format!(
                "memory bank needs positive capacity and dim, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            keys: vec![0.0; capacity * dim],
            count: 0,
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Appends one key, evicting the oldest when full.
    pub fn push_one(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(CodaError::Shape(format!(
                "key of dimension {} pushed to a bank of dimension {}",
                key.len(),
                self.dim
            )));
        }
        let n = l2_norm(key);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(CodaError::Numerical(format!("bank keys must be unit norm, got {n}")));
        }
        self.keys[self.head * self.dim..(self.head + 1) * self.dim].copy_from_slice(key);
        self.head = (self.head + 1) % self.capacity;
        self.count = (self.count + 1).min(self.capacity);
        Ok(())
    }

    /// Pushes the batch in order, skipping zero-flagged rows. Returns how many were stored.
    pub fn push(&mut self, keys: &Projection) -> Result<usize> {
        if keys.unit.cols != self.dim {
            return Err(CodaError::Shape(format!(
                "keys of dimension {} pushed to a bank of dimension {}",
                keys.unit.cols, self.dim
            )));
        }
        let mut stored = 0;
        for i in 0..keys.unit.rows {
            if keys.flagged[i] {
                continue;
            }
            self.push_one(keys.unit.row(i))?;
            stored += 1;
        }
        Ok(stored)
    }

    /// Contents oldest-to-newest, detached from the bank.
    pub fn snapshot(&self) -> BankSnapshot {
        let mut out = Vec::with_capacity(self.count * self.dim);
        let start = if self.count < self.capacity { 0 } else { self.head };
        for j in 0..self.count {
            let slot = (start + j) % self.capacity;
            out.extend_from_slice(&self.keys[slot * self.dim..(slot + 1) * self.dim]);
        }
        BankSnapshot {
            dim: self.dim,
            keys: Arc::new(out),
        }
    }
}

/// Immutable view of bank contents for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    dim: usize,
    keys: Arc<Vec<f64>>,
}

impl BankSnapshot {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            keys: Arc::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Flat `len × dim` row-major keys.
    pub fn as_flat(&self) -> &[f64] {
        &self.keys
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.keys.chunks_exact(self.dim)
    }
}

/// Requested capacity clamped to the training-set size (and at least 1).
pub fn effective_capacity(requested: usize, train_size: usize) -> usize {
    requested.min(train_size).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub key_params: ModelParams,
    pub gamma: f64,
}

impl MomentumState {
    /// Key encoder initialized as a copy of the query encoder.
    pub fn new(query: &ModelParams, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(CodaError::Config(format!("momentum {gamma} outside [0, 1]")));
        }
        Ok(Self {
            key_params: query.clone(),
            gamma,
        })
    }

    /// `θ̄ ← γ·θ̄ + (1 − γ)·θ`, elementwise over every tensor.
    pub fn update(&mut self, query: &ModelParams) -> Result<()> {
        if !self.key_params.same_shape(query) {
            return Err(CodaError::Shape("key and query parameters differ in shape".into()));
        }
        let g = self.gamma;
        for ((_, k), (_, q)) in self.key_params.tensors_mut().into_iter().zip(query.tensors()) {
            for (kv, qv) in k.data.iter_mut().zip(&q.data) {
                *kv = g * *kv + (1.0 - g) * qv;
            }
        }
        Ok(())
    }

    /// Keys for original examples: key encoder in eval mode, then the projection head.
    pub fn compute_keys(&self, tokens: &[TokenSequence]) -> Result<Projection> {
        let batch = embed(&self.key_params, tokens)?;
        let out = forward(&self.key_params, &batch, Dropout::off())?;
        Ok(project(&self.key_params, &out.pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, ModelDims};
    use crate::tensor::Matrix;

    fn proj(rows: &[&[f64]], flagged: &[bool]) -> Projection {
        let dim = rows[0].len();
        Projection {
            unit: Matrix::from_vec(rows.len(), dim, rows.concat()).unwrap(),
            norms: vec![1.0; rows.len()],
            flagged: flagged.to_vec(),
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(2, 2).unwrap();
        for k in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]] {
            bank.push_one(&k).unwrap();
        }
        let snap = bank.snapshot();
        assert_eq!(snap.as_flat(), &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn push_counts_and_skips_flagged() {
        let mut bank = MemoryBank::new(8, 2).unwrap();
        let p = proj(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]], &[false, true, false]);
        assert_eq!(bank.push(&p).unwrap(), 2);
        assert_eq!(bank.len(), 2);
        assert!(bank.push_one(&[1.0, 0.0, 0.0]).is_err());
        assert!(bank.push_one(&[2.0, 0.0]).is_err());
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        assert!(bank.snapshot().is_empty());
        bank.push_one(&[1.0, 0.0]).unwrap();
        let snap = bank.snapshot();
        assert_eq!(snap, bank.snapshot());
        bank.push_one(&[0.0, 1.0]).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap.as_flat(), &[1.0, 0.0]);
    }

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 20,
            d_emb: 4,
            d_hid: 6,
            d_proj: 3,
            num_classes: 2,
        }
    }

    #[test]
    fn momentum_endpoints_and_geometric_gap() {
        let theta = init_params(dims(), 1).unwrap();
        let other = init_params(dims(), 2).unwrap();

        let mut s = MomentumState::new(&other, 1.0).unwrap();
        s.update(&theta).unwrap();
        assert_eq!(s.key_params, other);

        let mut s = MomentumState::new(&other, 0.0).unwrap();
        s.update(&theta).unwrap();
        assert_eq!(s.key_params, theta);

        let mut zero = theta.zeros_like();
        let mut one = theta.zeros_like();
        for (_, t) in one.tensors_mut() {
            t.data.fill(1.0);
        }
        zero.embed.data[0] = 0.0;
        let mut s = MomentumState::new(&zero, 0.99).unwrap();
        s.update(&one).unwrap();
        assert!((s.key_params.enc_w1.data[0] - 0.01).abs() < 1e-15);
        for _ in 1..50 {
            s.update(&one).unwrap();
        }
        let gap = 1.0 - s.key_params.enc_w1.data[0];
        assert!((gap - 0.99f64.powi(50)).abs() < 1e-12);

        assert!(MomentumState::new(&theta, 1.5).is_err());
        let mut bad = ModelParams::zeros(ModelDims { d_hid: 7, ..dims() });
        assert!(MomentumState::new(&theta, 0.5).unwrap().update(&bad).is_err());
        bad.enc_b1.data.clear();
    }

    #[test]
    fn keys_match_query_projection_when_gamma_zero() {
        let theta = init_params(dims(), 3).unwrap();
        let mut s = MomentumState::new(&init_params(dims(), 4).unwrap(), 0.0).unwrap();
        s.update(&theta).unwrap();
        let toks = vec![
            TokenSequence { ids: vec![4, 5, 6], source_text: String::new() },
            TokenSequence { ids: vec![], source_text: String::new() },
        ];
        let keys = s.compute_keys(&toks).unwrap();
        let batch = embed(&theta, &toks).unwrap();
        let q = project(&theta, &forward(&theta, &batch, Dropout::off()).unwrap().pooled);
        assert_eq!(keys, q);
        assert!((l2_norm(keys.unit.row(0)) - 1.0).abs() < 1e-9);
        assert!(keys.flagged[1]);
    }

    #[test]
    fn capacity_clamp() {
        assert_eq!(effective_capacity(65536, 2048), 2048);
        assert_eq!(effective_capacity(100, 2048), 100);
        assert_eq!(effective_capacity(100, 0), 1);
    }
}
