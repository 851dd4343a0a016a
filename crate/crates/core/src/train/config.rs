use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionShape};
use crate::mine::NegativeSampling;
use crate::model::{check_lambda, ModelConfig};
use crate::pooling::{Activation, Pooling};

/// How MINE negatives are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    #[default]
    Shift,
    /// A fresh seeded derangement per batch.
    Permutation,
}

impl NegativeMode {
    pub fn sampling(self, seed: u64) -> NegativeSampling {
        match self {
            NegativeMode::Shift => NegativeSampling::Shift,
            NegativeMode::Permutation => NegativeSampling::Permutation(seed),
        }
    }
}

/// Everything that determines a multi-run experiment, apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub runs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda_mi: f64,
    pub patience: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub max_epochs: usize,
    pub split_train_frac: f64,
    pub pooling: Pooling,
    pub fusion: FusionKind,
    pub proj_dim: usize,
    pub activation: Activation,
    pub asp_hidden: usize,
    pub at_hidden: usize,
    pub mfb_factor: usize,
    pub mfh_blocks: usize,
    pub mine_hidden: usize,
    pub negatives: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shape = FusionShape::default();
        Self {
            seed: 0,
            runs: 5,
            batch_size: 8,
            lr0: 1e-4,
            lambda_mi: 0.25,
            patience: 8,
            step_size: 4,
            gamma: 0.1,
            max_epochs: 100,
            split_train_frac: 0.65,
            pooling: Pooling::Asp,
            fusion: FusionKind::At,
            proj_dim: 256,
            activation: Activation::Tanh,
            asp_hidden: 128,
            at_hidden: shape.at_hidden,
            mfb_factor: shape.mfb_factor,
            mfh_blocks: shape.mfh_blocks,
            mine_hidden: 128,
            negatives: NegativeMode::Shift,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        check_lambda(self.lambda_mi)?;
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.step_size == 0 {
            return fail("step_size must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if !(self.split_train_frac > 0.0 && self.split_train_frac < 1.0) {
            return fail(format!(
                "split_train_frac must lie strictly between 0 and 1, got {}",
                self.split_train_frac
            ));
        }
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, d_t: usize, d_a: usize) -> ModelConfig {
        ModelConfig {
            d_t,
            d_a,
            pooling: self.pooling,
            activation: self.activation,
            asp_hidden: self.asp_hidden,
            proj_dim: self.proj_dim,
            fusion: self.fusion,
            at_hidden: self.at_hidden,
            mfb_factor: self.mfb_factor,
            mfh_blocks: self.mfh_blocks,
            mine_hidden: self.mine_hidden,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("train config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
