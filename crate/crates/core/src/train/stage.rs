//! The step loop: one stage at a time, stages chained into a plan.

use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::flops::{plan_compute, CostReport};
use crate::mask::truncate_text;
use crate::model::{
    encode_image_batch, encode_text_batch, patchify, ClipModel, ImageSample, TextSample,
};
use crate::tensor::{Graph, Precision, Tensor};
use crate::train::infonce::infonce_loss;
use crate::train::optim::{cosine_lr, AdamW};
use crate::train::plan::{StageConfig, TrainPlan};

/// Token id reserved for padding.
pub const PAD_ID: u32 = 0;

/// Deterministic source of (image, caption) pairs. `pair(i, side)` must be a
/// pure function of its arguments so that reruns and prefetch order cannot
/// change training; the trainer wraps indices modulo `len()` (epoch cycling)
/// but keys masks on the unwrapped global counter.
pub trait PairStream {
    fn len(&self) -> u64;
    /// Pixels as `side·side·3` channel-interleaved values in [0, 1], plus
    /// caption token ids (unpadded).
    fn pair(&self, index: u64, image_side: usize) -> Result<(Vec<f64>, Vec<u32>), TrainError>;
}

/// One step of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: usize,
    pub loss: f64,
    pub lr: f64,
    /// Measured multiply-accumulates for the step (forward + backward).
    pub flops: u64,
    pub wall_ms: f64,
}

/// JSON Lines, one record per step.
pub fn write_metrics_jsonl<W: io::Write>(mut w: W, metrics: &[StepMetrics]) -> io::Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Mutable training state carried across stages.
pub struct Trainer {
    pub model: ClipModel,
    pub opt: AdamW,
    pub precision: Precision,
    /// Samples consumed so far; also the mask substream key.
    pub sample_counter: u64,
    pub global_step: u64,
    pub metrics: Vec<StepMetrics>,
    /// Times the positional embedding was re-gridded for a new resolution.
    pub resize_count: usize,
}

impl Trainer {
    pub fn new(model: ClipModel, opt: AdamW, precision: Precision) -> Self {
        Self {
            model,
            opt,
            precision,
            sample_counter: 0,
            global_step: 0,
            metrics: Vec::new(),
            resize_count: 0,
        }
    }

    /// Run every step of one stage. On a non-finite loss or gradient the
    /// error propagates with the parameters still at their last good values
    /// (detection happens before the update is applied).
    pub fn train_stage(
        &mut self,
        stage_index: usize,
        stage: &StageConfig,
        data: &dyn PairStream,
    ) -> Result<(), TrainError> {
        stage.validate(stage_index)?;
        if data.len() == 0 {
            return Err(TrainError::EmptyStream);
        }
        if self.model.image_side != stage.image_side {
            self.model.set_resolution(stage.image_side, false)?;
            self.resize_count += 1;
        }
        let patch = self.model.cfg.image.patch();
        let grid = stage.image_side / patch;
        let n_tokens = grid * grid;
        let steps = stage.steps();
        let warmup_steps = stage.warmup_samples / stage.batch_size as u64;
        self.opt.weight_decay = stage.weight_decay;

        for step in 0..steps {
            let started = Instant::now();
            let lr = cosine_lr(step, steps, warmup_steps, stage.peak_lr, stage.lr_floor);

            let mut g = Graph::new(self.precision);
            let nodes = self.model.leaf_params(&mut g, true);
            let mut images = Vec::with_capacity(stage.batch_size);
            let mut texts = Vec::with_capacity(stage.batch_size);
            for b in 0..stage.batch_size as u64 {
                let sample_index = self.sample_counter + b;
                let (pixels, ids) = data.pair(sample_index % data.len(), stage.image_side)?;
                let image = Tensor::from_vec(
                    vec![stage.image_side, stage.image_side, 3],
                    pixels,
                )
                .map_err(crate::error::ModelError::from)?;
                let patches = patchify(&image, patch)?;
                images.push(ImageSample {
                    patches: patches.data().to_vec(),
                    n_tokens,
                    mask: stage.mask.make(grid, grid, sample_index)?,
                });
                let (ids, real) = truncate_text(&ids, stage.text_len, PAD_ID);
                texts.push(TextSample { ids, real });
            }

            let img_emb = encode_image_batch(&mut g, &nodes, &self.model.cfg.image, &images)?;
            let txt_emb = encode_text_batch(&mut g, &nodes, &self.model.cfg.text, &texts)?;
            let loss_node = infonce_loss(&mut g, img_emb, txt_emb, nodes.get("logit_t"))?;
            let loss = g.value(loss_node).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: self.global_step as usize,
                    stage: stage_index,
                });
            }

            g.backward(loss_node)?;
            let mut grads: Vec<Vec<f64>> = self
                .model
                .params
                .iter()
                .map(|(name, _)| {
                    nodes
                        .iter()
                        .find(|(n, _)| *n == name)
                        .and_then(|(_, id)| g.grad(id))
                        .map(<[f64]>::to_vec)
                        .unwrap_or_default()
                })
                .collect();
            let flops = g.macs();
            drop(g);
            self.opt.step(&mut self.model.params, &mut grads, lr)?;

            self.metrics.push(StepMetrics {
                step: self.global_step,
                stage: stage_index,
                loss,
                lr,
                flops,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            self.global_step += 1;
            self.sample_counter += stage.batch_size as u64;
        }
        Ok(())
    }
}

/// Everything a finished plan leaves behind.
pub struct PlanOutcome {
    pub model: ClipModel,
    pub metrics: Vec<StepMetrics>,
    /// Analytical compute, one report per stage.
    pub reports: Vec<CostReport>,
    pub warnings: Vec<String>,
    pub resize_count: usize,
}

/// Initialize a fresh model from the plan's seed and run its stages in
/// order, carrying parameters and optimizer state across stage boundaries.
pub fn run_plan(
    plan: &TrainPlan,
    data: &dyn PairStream,
    precision: Precision,
) -> Result<PlanOutcome, TrainError> {
    let warnings = plan.validate()?;
    let model = ClipModel::new(plan.clip.clone(), plan.stages[0].image_side, plan.seed)?;
    let mut trainer = Trainer::new(model, AdamW::defaults(), precision);
    let mut reports = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        trainer.train_stage(i, stage, data)?;
        let sub = TrainPlan {
            clip: plan.clip.clone(),
            stages: vec![stage.clone()],
            seed: plan.seed,
        };
        reports.push(plan_compute(&sub, 1)?);
    }
    Ok(PlanOutcome {
        model: trainer.model,
        metrics: trainer.metrics,
        reports,
        warnings,
        resize_count: trainer.resize_count,
    })
}
