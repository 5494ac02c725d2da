//! Two-stage training: encoder pre-training on link reconstruction, then
//! scoring-head fine-tuning on (query, positive, hard negative) triplets with
//! the encoder frozen.

mod losses;
mod negatives;
mod stage1;
mod stage2;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamW;
use crate::corpus::{ChunkRef, DEFAULT_OVERLAP_THRESHOLD};
use crate::error::{Error, Result};

pub use losses::{
    reconstruction_loss, sample_link_pairs, triplet_bce_loss, triplet_bce_value, LinkSamples,
    TripletLoss,
};
pub use negatives::{relevant_chunks, sample_hard_negatives};
pub use stage1::{stage1_batches, train_stage1, Stage1Output};
pub use stage2::{
    encode_subgraphs, fit_triplets, mine_triplets, train_stage2, triplet_scores, EncodedSubgraphs,
    Stage2Output,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub margin: f64,
    pub lambda_triplet: f64,
    pub lambda_bce: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    pub ego_radius: usize,
    pub negatives_per_positive: usize,
    pub overlap_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 128,
            weight_decay: 1e-4,
            dropout: 0.3,
            margin: 0.1,
            lambda_triplet: 1.0,
            lambda_bce: 1.0,
            stage1_epochs: 3,
            stage2_epochs: 20,
            seed: 0,
            ego_radius: 1,
            negatives_per_positive: 4,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lambda_triplet", self.lambda_triplet),
            ("lambda_bce", self.lambda_bce),
            ("overlap_threshold", self.overlap_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must lie in (0, 1), got {}",
                self.margin
            )));
        }
        if self.batch_size == 0 || self.ego_radius == 0 || self.negatives_per_positive == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, ego_radius and negatives_per_positive must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// `positive` is labeled relevant for the query, `negative` is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    /// Position in the query list the triplets were mined from.
    pub query: usize,
    pub positive: ChunkRef,
    pub negative: ChunkRef,
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}
