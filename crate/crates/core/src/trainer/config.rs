use serde::{Deserialize, Serialize};

use crate::augment::{AugmentSettings, StrategySpec};
use crate::error::{CodaError, Result};
use crate::objectives::{AdvTerm, Divergence, LossWeights, ObjectiveSettings, StopGrad};

pub const ALPHA_WINDOW: (f64, f64) = (0.0, 1.0);
pub const BETA_WINDOW: (f64, f64) = (0.0, 3.0);
pub const LAMBDA_WINDOW: (f64, f64) = (0.0, 0.03);

/// Every scalar hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_weight: f64,
    pub tau: f64,
    pub gamma: f64,
    pub bank_capacity: usize,
    pub contrast_warmup_steps: u64,
    pub epsilon: f64,
    pub adv_steps: usize,
    pub strategy: String,
    pub mixup_alpha: f64,
    pub cutoff_ratio: f64,
    pub replace_rate: f64,
    pub adv_term: AdvTerm,
    pub divergence: Divergence,
    pub stop_grad: StopGrad,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f64,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_proj: usize,
    pub min_freq: u64,
    pub max_vocab: usize,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many steps; 0 means once per epoch.
    pub eval_every: u64,
    pub init_from: Option<String>,
    pub force_weights: bool,
    /// Write elapsed seconds into metrics records. Off keeps metrics reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentSettings::default();
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_weight: 0.03,
            tau: 1.0,
            gamma: 0.99,
            bank_capacity: 65536,
            contrast_warmup_steps: 0,
            epsilon: aug.epsilon,
            adv_steps: aug.adv_steps,
            strategy: "stack(back,adv)".into(),
            mixup_alpha: aug.mixup_alpha,
            cutoff_ratio: aug.cutoff_ratio,
            replace_rate: aug.replace_rate,
            adv_term: AdvTerm::At,
            divergence: Divergence::Js,
            stop_grad: StopGrad::None,
            lr: 1e-3,
            batch_size: 32,
            epochs: 5,
            warmup_ratio: 0.06,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rate: 0.1,
            d_emb: 32,
            d_hid: 64,
            d_proj: 32,
            min_freq: 1,
            max_vocab: 50_000,
            seed: 0,
            eval_every: 0,
            init_from: None,
            force_weights: false,
            record_wall_time: false,
        }
    }
}

fn in_window(name: &str, v: f64, (lo, hi): (f64, f64), force: bool) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(CodaError::Config(format!("{name} = {v} must be a finite non-negative number")));
    }
    if !force && !(lo..=hi).contains(&v) {
        return Err(CodaError::Config(format!(
            "{name} = {v} is outside the allowed window [{lo}, {hi}]; pass force_weights to override"
        )));
    }
    Ok(())
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda_weight,
        }
    }

    pub fn augment_settings(&self) -> AugmentSettings {
        AugmentSettings {
            cutoff_ratio: self.cutoff_ratio,
            replace_rate: self.replace_rate,
            epsilon: self.epsilon,
            adv_steps: self.adv_steps,
            mixup_alpha: self.mixup_alpha,
        }
    }

    pub fn strategy_spec(&self) -> Result<StrategySpec> {
        StrategySpec::parse(&self.strategy, self.augment_settings())
    }

    pub fn objective_settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            weights: self.weights(),
            tau: self.tau,
            adv_term: self.adv_term,
            divergence: self.divergence,
            stop_grad: self.stop_grad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        in_window("alpha", self.alpha, ALPHA_WINDOW, self.force_weights)?;
        in_window("beta", self.beta, BETA_WINDOW, self.force_weights)?;
        in_window("lambda_weight", self.lambda_weight, LAMBDA_WINDOW, self.force_weights)?;
        let bad = |m: String| Err(CodaError::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau = {} must be > 0", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr = {} must be > 0", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio = {} outside [0, 1]", self.warmup_ratio));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate = {} outside [0, 1)", self.dropout_rate));
        }
        if self.d_emb == 0 || self.d_hid == 0 || self.d_proj == 0 {
            return bad("model dimensions must be >= 1".into());
        }
        self.strategy_spec()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn weight_windows_and_force() {
        let mut c = TrainConfig {
            lambda_weight: 0.5,
            ..TrainConfig::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("[0, 0.03]"), "{e}");
        c.force_weights = true;
        c.validate().unwrap();
        c.lambda_weight = -1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            beta: 3.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn bad_strategy_is_rejected() {
        let c = TrainConfig {
            strategy: "stack(adv,back)".into(),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected_by_serde() {
        let v = serde_json::json!({"alpha": 0.5, "bogus": 1});
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
        let v = serde_json::json!({"alpha": 0.5});
        let c: TrainConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.beta, 1.0);
    }
}
