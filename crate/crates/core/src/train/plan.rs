//! Stage and plan descriptions for multi-stage training: a masked low-res
//! pretrain followed by masked and/or higher-resolution finetune stages.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::mask::MaskSpec;
use crate::model::ClipConfig;

/// One training stage at a fixed resolution, mask setting, and text length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub image_side: usize,
    pub mask: MaskSpec,
    pub text_len: usize,
    /// Total samples consumed by the stage (batch_size × steps).
    pub samples_seen: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_samples: u64,
    pub lr_floor: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn steps(&self) -> u64 {
        self.samples_seen / self.batch_size as u64
    }

    pub fn validate(&self, stage: usize) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.samples_seen < self.batch_size as u64 {
            return Err(TrainError::TooFewSamples {
                stage,
                samples: self.samples_seen as usize,
                batch: self.batch_size,
            });
        }
        if !(self.peak_lr.is_finite() && self.lr_floor.is_finite() && self.weight_decay.is_finite())
            || self.peak_lr < 0.0
            || self.lr_floor < 0.0
            || self.weight_decay < 0.0
        {
            return Err(TrainError::BadHyper(format!(
                "peak_lr {}, lr_floor {}, weight_decay {} must be finite and >= 0",
                self.peak_lr, self.lr_floor, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Ordered stages plus the model they train and the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub clip: ClipConfig,
    pub stages: Vec<StageConfig>,
    pub seed: u64,
}

impl TrainPlan {
    /// Check hard invariants; returns human-readable warnings for soft ones
    /// (a finetune stage at lower resolution than its predecessor).
    pub fn validate(&self) -> Result<Vec<String>, TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::EmptyPlan);
        }
        self.clip
            .validate()
            .map_err(|e| TrainError::BadHyper(e.to_string()))?;
        let patch = self.clip.image.patch();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate(i)?;
            if stage.image_side % patch != 0 {
                return Err(TrainError::BadHyper(format!(
                    "stage {i}: image_side {} not divisible by patch size {patch}",
                    stage.image_side
                )));
            }
            if stage.text_len == 0 || stage.text_len > self.clip.text_len {
                return Err(TrainError::BadHyper(format!(
                    "stage {i}: text_len {} outside 1..={}",
                    stage.text_len, self.clip.text_len
                )));
            }
        }
        let mut warnings = Vec::new();
        for i in 2..self.stages.len() {
            if self.stages[i].image_side < self.stages[i - 1].image_side {
                warnings.push(format!(
                    "stage {i} resolution {} is below stage {} resolution {}",
                    self.stages[i].image_side,
                    i - 1,
                    self.stages[i - 1].image_side
                ));
            }
        }
        Ok(warnings)
    }
}
