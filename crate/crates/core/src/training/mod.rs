//! Optimisation of the variability encoder.
//!
//! Pretraining fits the decoder with the latent branch switched off, in two
//! stages by default: first the phoneme LSTM and readout through a temporary
//! bypass map, then the full decoder stack. Fine-tuning then optimises the
//! complete objective. Every run performs exactly one RMSProp update per
//! utterance per epoch, visiting utterances in a seeded per-epoch shuffle.

mod checkpoint;
mod rmsprop;
mod trainer;

pub use checkpoint::{
    fingerprint, Checkpoint, Fingerprint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use rmsprop::{clip_global_norm, OptimizerState, RmsProp};
pub use trainer::{finetune, pretrain_decoder, train_fingerprint, EpochStats, TrainOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs run at `base_lr` before halving starts.
    pub constant_epochs: usize,
    /// Fine-tuning epochs.
    pub epochs: usize,
    /// Epochs per pretraining stage.
    pub pretrain_epochs: usize,
    /// Single joint pretraining stage instead of the two-stage schedule.
    pub pretrain_joint: bool,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Exact parameter names never updated.
    pub frozen: Vec<String>,
    /// `*`-glob over parameter names → learning-rate factor. Factors of
    /// all matching patterns multiply.
    pub lr_multipliers: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            constant_epochs: 4,
            epochs: 20,
            pretrain_epochs: 10,
            pretrain_joint: false,
            rho: 0.9,
            eps: 1e-8,
            clip_norm: 5.0,
            frozen: Vec::new(),
            lr_multipliers: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        for (pattern, &factor) in &self.lr_multipliers {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::Config(format!(
                    "lr multiplier for `{pattern}` must be positive, got {factor}"
                )));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            rho: self.rho,
            eps: self.eps,
        }
    }

    /// Learning rate for parameter `name` during `epoch`.
    pub fn lr_for(&self, epoch: usize, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .filter(|(pattern, _)| glob_match(pattern, name))
            .fold(
                lr_at(epoch, self.base_lr, self.constant_epochs),
                |lr, (_, f)| lr * f,
            )
    }
}

/// `base_lr` for the first `constant_epochs` epochs, halved every epoch after.
pub fn lr_at(epoch: usize, base_lr: f64, constant_epochs: usize) -> f64 {
    if epoch < constant_epochs {
        base_lr
    } else {
        let halvings = (epoch - constant_epochs + 1).min(i32::MAX as usize) as i32;
        base_lr * 0.5f64.powi(halvings)
    }
}

/// Glob match supporting only `*` (any run of characters).
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        for e in 0..4 {
            assert_eq!(lr_at(e, 0.1, 4), 0.1);
        }
        assert_eq!(lr_at(4, 0.1, 4), 0.05);
        assert_eq!(lr_at(6, 0.1, 4), 0.0125);
        assert_eq!(lr_at(0, 0.1, 0), 0.05);
    }

    #[test]
    fn globbing() {
        assert!(glob_match("dec.*", "dec.out.w"));
        assert!(glob_match("*.w", "dec.out.w"));
        assert!(glob_match("enc.*.w_i", "enc.lstm.w_i"));
        assert!(!glob_match("enc.*.w_i", "enc.lstm.u_i"));
        assert!(glob_match("dec.out.w", "dec.out.w"));
        assert!(!glob_match("dec.out", "dec.out.w"));
        assert!(!glob_match("a*a", "a"));
    }

    #[test]
    fn multipliers_compose() {
        let cfg = TrainConfig {
            base_lr: 1.0,
            lr_multipliers: [("dec.*".to_owned(), 2.0), ("*.w".to_owned(), 3.0)].into(),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_for(0, "dec.out.w"), 6.0);
        assert_eq!(cfg.lr_for(0, "dec.out.b"), 2.0);
        assert_eq!(cfg.lr_for(4, "enc.mu.b"), 0.5);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_multipliers: [("x".to_owned(), -1.0)].into(),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
