use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, Resources, Silent, TrainConfig};
use crate::corpus::{subsample, LabeledDataset};
use crate::error::{CodaError, Result};

/// Training recipes compared by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The configured weights and strategy.
    Coda,
    /// Cross-entropy only: α = β = λ = 0.
    Baseline,
    /// Contrastive term only: α = β = 0, configured λ.
    ContrastOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Coda, Method::Baseline, Method::ContrastOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Coda => "coda",
            Method::Baseline => "baseline",
            Method::ContrastOnly => "contrast_only",
        }
    }

    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::Coda => {}
            Method::Baseline => {
                c.alpha = 0.0;
                c.beta = 0.0;
                c.lambda_weight = 0.0;
            }
            Method::ContrastOnly => {
                c.alpha = 0.0;
                c.beta = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| CodaError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub method: Method,
    pub train_size: usize,
    /// Final dev accuracy; `None` when the cell failed.
    pub accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Trains every `(fraction, seed, method)` cell and evaluates it on `dev`.
///
/// Cells run in parallel; each is a pure function of its coordinates, and the
/// rows come back in `fraction`, `seed`, `method` order. A failing cell records
/// its error and does not stop the others.
pub fn low_resource_sweep(
    train: &LabeledDataset,
    dev: &LabeledDataset,
    fractions: &[f64],
    config: &TrainConfig,
    seeds: &[u64],
    methods: &[Method],
    res: Resources<'_>,
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(CodaError::Config(format!("sweep fraction {f} outside (0, 1]")));
    }
    let cells: Vec<(f64, u64, Method)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().flat_map(move |&s| methods.iter().map(move |&m| (f, s, m))))
        .collect();
    let rows = cells
        .into_par_iter()
        .map(|(fraction, seed, method)| {
            let mut row = SweepRow {
                fraction,
                seed,
                method,
                train_size: 0,
                accuracy: None,
                best_accuracy: None,
                error: None,
            };
            let run = || -> Result<_> {
                let subset = subsample(train, fraction, seed)?;
                let mut cfg = method.configure(config);
                cfg.seed = seed;
                let out = fit(&subset, Some(dev), &cfg, res, None, &mut Silent)?;
                Ok((subset.len(), out))
            };
            match run() {
                Ok((n, out)) => {
                    row.train_size = n;
                    row.accuracy = out.final_dev.map(|r| r.accuracy);
                    row.best_accuracy = out.best_dev.map(|r| r.accuracy);
                }
                Err(e) => {
                    log::error!("sweep cell fraction={fraction} seed={seed} method={method}: {e}");
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect();
    Ok(rows)
}
