//! Two-stage coarse-to-fine orchestration: stage 1 predicts organ
//! foreground at reduced resolution to derive an ROI; stage 2 segments at
//! full resolution inside it.

mod infer;
mod sampler;
mod train;

pub use infer::{predict_cascade, predict_stage1, tile_inference, Stage1Prediction};
pub use sampler::{sample_patches, PatchBatch, PatchSampler};
pub use train::{evaluate_batch_loss, inverse_frequency_weights, train_stage, TrainOutcome};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::preproc::{self, MixConfig, DEFAULT_ROI_MARGIN, DEFAULT_SKIN_THRESHOLD_HU};
use crate::volume::{DectPair, Dims, LabelVolume, MaskVolume, Spacing, Volume};
use crate::{Error, Result};

/// Everything one training or inference stage needs to know.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// 1 (coarse, downsampled) or 2 (fine, ROI-cropped).
    pub stage: u8,
    /// Resolution divisor for stage-1 data; 1 for stage 2.
    pub downsample: usize,
    /// Cubic patch extent.
    pub patch: usize,
    pub batch: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    /// Probability that a patch is centered on a foreground voxel.
    pub fg_fraction: f64,
    pub alpha_training: f64,
    /// Start from this checkpoint (fine-tuning) instead of fresh weights.
    pub init_checkpoint: Option<PathBuf>,
    /// ROI dilation in voxels (ground-truth box at training, stage-1 box
    /// at inference).
    pub roi_margin: usize,
    /// Emit a parameter snapshot every this many iterations (0 = final
    /// snapshot only). Snapshots feed validation-based model selection.
    pub snapshot_interval: u64,
    /// Stop early once the smoothed training loss drops below this.
    pub stop_at_loss: Option<f32>,
}

impl StagePlan {
    pub fn stage1(alpha_training: f64) -> Self {
        StagePlan {
            stage: 1,
            downsample: 2,
            patch: 32,
            batch: 2,
            iterations: 400,
            learning_rate: 1e-3,
            fg_fraction: 0.5,
            alpha_training,
            init_checkpoint: None,
            roi_margin: DEFAULT_ROI_MARGIN,
            snapshot_interval: 0,
            stop_at_loss: None,
        }
    }

    pub fn stage2(alpha_training: f64) -> Self {
        StagePlan { stage: 2, downsample: 1, ..Self::stage1(alpha_training) }
    }

    /// Switch to fine-tuning: init from a checkpoint at a 10x lower
    /// learning rate.
    pub fn finetune_from(mut self, checkpoint: PathBuf) -> Self {
        self.init_checkpoint = Some(checkpoint);
        self.learning_rate = 1e-4;
        self
    }

    pub fn validate(&self, patch_divisor: usize) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::InvalidConfig(format!("stage {} must be 1 or 2", self.stage)));
        }
        if self.downsample == 0 {
            return Err(Error::InvalidConfig("zero downsample factor".into()));
        }
        if self.patch == 0 || self.patch % patch_divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch {} must be a positive multiple of {patch_divisor}",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("zero batch size".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::InvalidConfig(format!(
                "sampling fraction {} outside [0, 1]",
                self.fg_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_training) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha_training
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("non-positive learning rate".into()));
        }
        Ok(())
    }
}

/// A case after preprocessing: the blended image, its body mask, and the
/// normalized network input, plus labels when training.
#[derive(Clone, Debug)]
pub struct CaseInput {
    pub id: String,
    pub mixed: Volume,
    pub body: MaskVolume,
    pub normalized: Volume,
    pub labels: Option<LabelVolume>,
}

impl CaseInput {
    pub fn dims(&self) -> Dims {
        self.mixed.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.mixed.spacing()
    }
}

/// Run the preprocessing chain: mix -> body mask -> normalize.
pub fn prepare_case(
    pair: &DectPair,
    alpha: f64,
    labels: Option<LabelVolume>,
    skin_threshold_hu: f32,
) -> Result<CaseInput> {
    if let Some(l) = &labels {
        if l.dims() != pair.dims() {
            return Err(Error::ShapeMismatch(format!(
                "labels dims {:?} != pair dims {:?}",
                l.dims(),
                pair.dims()
            )));
        }
    }
    let mixed = preproc::mix(pair.low(), pair.high(), MixConfig::new(alpha)?)?;
    let body = preproc::body_mask(&mixed, skin_threshold_hu)?;
    let normalized = preproc::normalize(&mixed, &body)?;
    Ok(CaseInput { id: pair.identifier().to_owned(), mixed, body, normalized, labels })
}

/// [`prepare_case`] with the default skin threshold.
pub fn prepare_case_default(
    pair: &DectPair,
    alpha: f64,
    labels: Option<LabelVolume>,
) -> Result<CaseInput> {
    prepare_case(pair, alpha, labels, DEFAULT_SKIN_THRESHOLD_HU)
}
