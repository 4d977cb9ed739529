//! CRNN sound source tracker: feature extractor `F`, DoA estimator `E`,
//! pretraining and inference.

mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::features::NUM_DIRECTIONS;

pub use data::{collate, pooled_centers, Batch, Example, ExampleStream, FixedStream};
pub use model::{DoaEstimator, FeatureExtractor, FeatureOutput, Mode, RunningStats, SstModel};
pub use train::{
    evaluate_set, infer, predict, pretrain, sst_loss, train_step, EpochRecord, EvalSummary,
    Optimizers, PretrainOutcome, TrainConfig,
};

/// Parameter-group ids used on the tape.
pub const GROUP_F: u32 = 0;
pub const GROUP_E: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrnnConfig {
    /// Twice the number of microphones.
    pub input_channels: usize,
    pub freq_bins: usize,
    pub conv_channels: usize,
    pub freq_pools: Vec<usize>,
    pub time_pools: Vec<usize>,
    pub gru_hidden: usize,
    /// Tanh, ReLU and sigmoid layer widths.
    pub estimator_widths: [usize; 3],
}

impl Default for CrnnConfig {
    fn default() -> Self {
        CrnnConfig {
            input_channels: 18,
            freq_bins: crate::features::NUM_BINS,
            conv_channels: 64,
            freq_pools: vec![4, 2, 2, 2, 2],
            time_pools: vec![1, 1, 1, 1, 5],
            gru_hidden: 256,
            estimator_widths: [512, 256, NUM_DIRECTIONS],
        }
    }
}

impl CrnnConfig {
    /// Narrow variant for desk-scale experiments.
    pub fn toy() -> Self {
        CrnnConfig {
            conv_channels: 8,
            gru_hidden: 32,
            estimator_widths: [64, 64, NUM_DIRECTIONS],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(config_err!(
                "unknown model preset {other:?} (expected default or toy)"
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_pools.len() != self.time_pools.len() || self.freq_pools.is_empty() {
            return Err(config_err!(
                "pool lists must be nonempty and of equal length"
            ));
        }
        if self
            .freq_pools
            .iter()
            .chain(&self.time_pools)
            .any(|k| *k == 0)
        {
            return Err(config_err!("pool sizes must be positive"));
        }
        if self.estimator_widths[2] != NUM_DIRECTIONS {
            return Err(config_err!("estimator must end in {NUM_DIRECTIONS} units"));
        }
        if self.pooled_freq() == 0 {
            return Err(config_err!(
                "frequency pooling empties {} bins",
                self.freq_bins
            ));
        }
        if self.conv_channels == 0 || self.gru_hidden == 0 || self.input_channels == 0 {
            return Err(config_err!("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.freq_pools.len()
    }

    /// Product of the time pools; output frames are `floor(L / time_stride)`.
    pub fn time_stride(&self) -> usize {
        self.time_pools.iter().product()
    }

    pub fn pooled_freq(&self) -> usize {
        self.freq_pools.iter().fold(self.freq_bins, |f, k| f / k)
    }

    pub fn gru_input(&self) -> usize {
        self.conv_channels * self.pooled_freq()
    }

    /// Output frames for `frames` input frames, following every floor step.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.time_pools.iter().fold(frames, |l, k| l / k)
    }
}
