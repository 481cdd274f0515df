//! Distillation objectives (KL on softened logits, Hint regression on an
//! intermediate feature, contrastive CRD on penultimate embeddings), the
//! crafted soft-label ablation, and the training loop shared by teachers,
//! independent students and distilled students.

mod heads;
mod losses;
mod optim;
mod train;

pub use heads::{BoundCrdHeads, BoundHintHead, CrdHeads, HintHead};
pub use losses::{
    crd_critic, loss_ce, loss_crd, loss_hint, loss_kl, make_pseudo_soft_labels, soft_cross_entropy,
};
pub use optim::{Adadelta, OptimizerConfig};
pub use train::{train, write_epoch_csv, EpochLog, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentMode, AugmentSpec};
use crate::error::{Error, Result};
use crate::nn::TAP_CONV2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Independent,
    Kl,
    Hint,
    Crd,
    PseudoSoft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Independent => "independent",
            Method::Kl => "kl",
            Method::Hint => "hint",
            Method::Crd => "crd",
            Method::PseudoSoft => "pseudo_soft",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Kl | Method::Hint | Method::Crd)
    }
}

/// Training-time augmentation: each item gets one draw per listed mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAugment {
    pub spec: AugmentSpec,
    pub modes: Vec<AugmentMode>,
}

/// The objective is `gamma·CE + alpha·KL` (KL and pseudo_soft),
/// `gamma·CE + beta·Hint`, `gamma·CE + beta·CRD`, or `gamma·CE` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// KL softening temperature, or the CRD critic temperature.
    pub tau: f64,
    pub hint_tap: String,
    pub crd_dim: usize,
    pub crd_negatives: usize,
    /// Standard deviation of the logit noise for crafted soft labels.
    pub pseudo_noise_sd: f64,
    /// Softmax temperature for crafted soft labels.
    pub pseudo_tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Student input channels; defaults to the larger of the data's and the
    /// teacher's.
    pub in_channels: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub augment: Option<TrainAugment>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Independent,
            gamma: 1.0,
            alpha: 0.0,
            beta: 0.0,
            tau: 1.0,
            hint_tap: TAP_CONV2.to_string(),
            crd_dim: 64,
            crd_negatives: 32,
            pseudo_noise_sd: 0.2f64.sqrt(),
            pseudo_tau: 0.15,
            epochs: 14,
            batch_size: 64,
            seed: 1,
            in_channels: None,
            optimizer: OptimizerConfig::default(),
            augment: None,
        }
    }
}

impl DistillConfig {
    /// The MNIST settings for each method: KL `γ=0.1, α=0.9, τ=8`; Hint
    /// `γ=1, β=2` on `conv2`; CRD `γ=1, β=0.1, τ=0.1, N=32`, 64-d embeddings;
    /// crafted soft labels with noise variance 0.2 and temperature 0.15,
    /// matched at student temperature 1.
    pub fn preset(method: Method) -> Self {
        let base = DistillConfig {
            method,
            ..Self::default()
        };
        match method {
            Method::Independent => base,
            Method::Kl => DistillConfig {
                gamma: 0.1,
                alpha: 0.9,
                tau: 8.0,
                ..base
            },
            Method::Hint => DistillConfig { beta: 2.0, ..base },
            Method::Crd => DistillConfig {
                beta: 0.1,
                tau: 0.1,
                ..base
            },
            Method::PseudoSoft => DistillConfig {
                gamma: 0.1,
                alpha: 0.9,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.method == Method::PseudoSoft && !(self.pseudo_tau > 0.0 && self.pseudo_noise_sd >= 0.0) {
            return Err(Error::Config("pseudo_tau must be > 0 and pseudo_noise_sd >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.method == Method::Crd && (self.crd_negatives == 0 || self.crd_dim == 0) {
            return Err(Error::Config("crd_negatives and crd_dim must be >= 1".into()));
        }
        if let Some(c) = self.in_channels {
            if c != 1 && c != 3 {
                return Err(Error::Config(format!("in_channels must be 1 or 3, got {c}")));
            }
        }
        if let Some(a) = &self.augment {
            a.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.optimizer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for m in [Method::Independent, Method::Kl, Method::Hint, Method::Crd, Method::PseudoSoft] {
            DistillConfig::preset(m).validate().unwrap();
        }
        let kl = DistillConfig::preset(Method::Kl);
        assert_eq!((kl.gamma, kl.alpha, kl.tau), (0.1, 0.9, 8.0));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = DistillConfig {
            tau: 0.0,
            ..DistillConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DistillConfig {
            beta: -1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
