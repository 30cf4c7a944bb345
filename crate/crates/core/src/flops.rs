//! Analytical compute accounting.
//!
//! Convention: one multiply-accumulate is one FLOP, and only matmuls count —
//! attention QKV/output projections, attention score and value products, the
//! MLP, patch embedding, and the final projections. Embedding lookups,
//! normalizations, activations, bias adds, and pooling are all zero. The op
//! graph's MAC counter follows the identical convention, and
//! `encoder_flops` must agree with it exactly on any config.
//!
//! Per tower with `L` layers, width `d`, and sequence length `n`:
//!
//! ```text
//! blocks     L · (12·n·d² + 2·n²·d)      QKV 3nd², out-proj nd², MLP 8nd²,
//!                                        scores n²d, attention·values n²d
//! embedding  (n − cls)·(P²·3)·d          image patch embed; text lookup = 0
//! projection d·e                         pooled vector into the shared space
//! ```
//!
//! "Training FLOPs" per sample is the forward compute of both towers; an
//! optional backward multiplier (1 forward + 2 backward ≈ 3×) is exposed for
//! whole-run estimates.

use serde::{Deserialize, Serialize};

use crate::error::CostError;
use crate::mask::keep_count;
use crate::model::{tokens_for_resolution, ModelConfig, TowerKind};
use crate::train::plan::TrainPlan;

/// Transformer-block MACs only: `L·(12·n·d² + 2·n²·d)`.
pub fn block_flops(layers: usize, width: usize, n_tokens: usize) -> u64 {
    let (l, d, n) = (layers as u64, width as u64, n_tokens as u64);
    l * (12 * n * d * d + 2 * n * n * d)
}

/// Full tower forward MACs at sequence length `n_tokens` (class token
/// included for image towers).
pub fn encoder_flops(cfg: &ModelConfig, n_tokens: usize) -> u64 {
    let d = cfg.width as u64;
    let embed = match cfg.tower {
        TowerKind::Image => {
            let cls = u64::from(cfg.use_class_token);
            let patch_dim = (cfg.patch() * cfg.patch() * 3) as u64;
            (n_tokens as u64 - cls) * patch_dim * d
        }
        TowerKind::Text => 0,
    };
    block_flops(cfg.layers, cfg.width, n_tokens) + embed + d * cfg.embed_dim as u64
}

/// Image tokens entering the transformer at the given resolution and mask
/// ratio: kept patches plus the class token.
pub fn image_tokens(cfg: &ModelConfig, image_side: usize, mask_ratio: f64) -> Result<usize, CostError> {
    let n = tokens_for_resolution(image_side, cfg.patch())?;
    Ok(keep_count(n, mask_ratio)? + usize::from(cfg.use_class_token))
}

/// Forward MACs for one training sample: both towers.
pub fn training_flops_per_sample(
    image: &ModelConfig,
    text: &ModelConfig,
    image_side: usize,
    mask_ratio: f64,
    text_len: usize,
) -> Result<u64, CostError> {
    let img_tokens = image_tokens(image, image_side, mask_ratio)?;
    Ok(encoder_flops(image, img_tokens) + encoder_flops(text, text_len))
}

/// One stage's contribution to a [`CostReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub image_side: usize,
    pub mask_ratio: f64,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub flops_per_sample: u64,
    pub samples: u64,
    pub stage_flops: u128,
}

/// Whole-plan compute, with optional wall-clock and price annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub total_flops: u128,
    /// Forward(1) or forward+backward(3) multiplier applied to totals.
    pub backward_multiplier: u32,
    /// Average per-sample FLOPs across stages after the first (the
    /// finetune stages), when the plan has at least two stages.
    pub blended_finetune_flops_per_sample: Option<f64>,
    pub gpu_hours: Option<f64>,
    pub dollars: Option<f64>,
    pub dollars_display: Option<u64>,
}

impl CostReport {
    pub fn with_measured_hours(mut self, hours: f64) -> Result<Self, CostError> {
        if hours < 0.0 || !hours.is_finite() {
            return Err(CostError::NegativeHours(hours));
        }
        self.gpu_hours = Some(hours);
        Ok(self)
    }

    /// Derive GPU-hours from a sustained MAC throughput (MACs per second).
    pub fn with_throughput(mut self, macs_per_second: f64) -> Result<Self, CostError> {
        if macs_per_second <= 0.0 || !macs_per_second.is_finite() {
            return Err(CostError::BadRate(macs_per_second));
        }
        self.gpu_hours = Some(self.total_flops as f64 / macs_per_second / 3600.0);
        Ok(self)
    }

    pub fn with_rate(mut self, rate: &RateCard) -> Result<Self, CostError> {
        let hours = self
            .gpu_hours
            .ok_or(CostError::NegativeHours(f64::NAN))?;
        let cost = dollar_cost(hours, rate)?;
        self.dollars = Some(cost.exact);
        self.dollars_display = Some(cost.display);
        Ok(self)
    }
}

/// Analytical compute for every stage of a plan. Stages are costed even when
/// the plan would fail stricter training validation; an empty plan is zero.
pub fn plan_compute(plan: &TrainPlan, backward_multiplier: u32) -> Result<CostReport, CostError> {
    let mult = backward_multiplier.max(1);
    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut total: u128 = 0;
    for (i, stage) in plan.stages.iter().enumerate() {
        let per_sample = training_flops_per_sample(
            &plan.clip.image,
            &plan.clip.text,
            stage.image_side,
            stage.mask.mask_ratio,
            stage.text_len,
        )? * mult as u64;
        let stage_flops = per_sample as u128 * stage.samples_seen as u128;
        total += stage_flops;
        stages.push(StageCost {
            stage: i,
            image_side: stage.image_side,
            mask_ratio: stage.mask.mask_ratio,
            image_tokens: image_tokens(&plan.clip.image, stage.image_side, stage.mask.mask_ratio)?,
            text_tokens: stage.text_len,
            flops_per_sample: per_sample,
            samples: stage.samples_seen,
            stage_flops,
        });
    }
    let blended = if stages.len() >= 2 {
        let ft_flops: u128 = stages[1..].iter().map(|s| s.stage_flops).sum();
        let ft_samples: u128 = stages[1..].iter().map(|s| s.samples as u128).sum();
        (ft_samples > 0).then(|| ft_flops as f64 / ft_samples as f64)
    } else {
        None
    };
    Ok(CostReport {
        stages,
        total_flops: total,
        backward_multiplier: mult,
        blended_finetune_flops_per_sample: blended,
        gpu_hours: None,
        dollars: None,
        dollars_display: None,
    })
}

/// Price of one GPU-hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCard {
    pub price_per_hour: f64,
    pub source: String,
}

impl RateCard {
    pub fn new(price_per_hour: f64, source: impl Into<String>) -> Result<Self, CostError> {
        if price_per_hour <= 0.0 || !price_per_hour.is_finite() {
            return Err(CostError::BadRate(price_per_hour));
        }
        Ok(Self {
            price_per_hour,
            source: source.into(),
        })
    }
}

/// Exact cost plus the whole-unit display value (round-half-up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DollarCost {
    pub exact: f64,
    pub display: u64,
}

pub fn dollar_cost(gpu_hours: f64, rate: &RateCard) -> Result<DollarCost, CostError> {
    if gpu_hours < 0.0 || !gpu_hours.is_finite() {
        return Err(CostError::NegativeHours(gpu_hours));
    }
    let exact = gpu_hours * rate.price_per_hour;
    Ok(DollarCost {
        exact,
        display: (exact + 0.5).floor() as u64,
    })
}

/// Input row for a cross-run comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub gpu_hours: f64,
    /// Price used to compute the cost column; ignored when `given_cost` is set
    /// (some published rows are reproduced as data, not recomputed).
    pub rate: Option<f64>,
    pub given_cost: Option<f64>,
    #[serde(default)]
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRowOut {
    pub label: String,
    pub gpu_hours: f64,
    pub cost_exact: Option<f64>,
    pub cost_display: Option<u64>,
    /// `hours / baseline hours`; absent for single-row reports.
    pub hours_ratio: Option<f64>,
    pub ratio_label: Option<String>,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<CompareRowOut>,
}

/// Cost/ratio table across runs. The baseline is the named row, or the row
/// with the fewest GPU-hours; ratios are `row / baseline`, so the expensive
/// run reads as "≈N×" the cheap one.
pub fn comparison_report(
    rows: &[CompareRow],
    baseline: Option<&str>,
) -> Result<ComparisonReport, CostError> {
    if rows.is_empty() {
        return Err(CostError::NoRows);
    }
    let base_idx = match baseline {
        Some(label) => rows
            .iter()
            .position(|r| r.label == label)
            .ok_or_else(|| CostError::BadBaseline(label.to_string()))?,
        None => {
            let mut idx = 0;
            for (i, row) in rows.iter().enumerate() {
                if row.gpu_hours < rows[idx].gpu_hours {
                    idx = i;
                }
            }
            idx
        }
    };
    let base_hours = rows[base_idx].gpu_hours;
    let single = rows.len() == 1;
    let out = rows
        .iter()
        .map(|row| {
            let (cost_exact, cost_display) = match (row.given_cost, row.rate) {
                (Some(given), _) => (Some(given), Some((given + 0.5).floor() as u64)),
                (None, Some(rate)) => {
                    let card = RateCard::new(rate, "row rate")?;
                    let cost = dollar_cost(row.gpu_hours, &card)?;
                    (Some(cost.exact), Some(cost.display))
                }
                (None, None) => (None, None),
            };
            let (hours_ratio, ratio_label) = if single || base_hours <= 0.0 {
                (None, None)
            } else {
                let ratio = row.gpu_hours / base_hours;
                let label = if (ratio - 1.0).abs() < 1e-9 {
                    "1×".to_string()
                } else {
                    format!("≈{}×", ratio.round() as i64)
                };
                (Some(ratio), Some(label))
            };
            Ok(CompareRowOut {
                label: row.label.clone(),
                gpu_hours: row.gpu_hours,
                cost_exact,
                cost_display,
                hours_ratio,
                ratio_label,
                metrics: row.metrics.clone(),
            })
        })
        .collect::<Result<Vec<_>, CostError>>()?;
    Ok(ComparisonReport {
        baseline: rows[base_idx].label.clone(),
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{MaskSpec, MaskStrategy};
    use crate::model::{flops_preset, toy_pair};
    use crate::train::plan::{StageConfig, TrainPlan};

    fn h14() -> (ModelConfig, ModelConfig) {
        let cfg = flops_preset("H/14").unwrap();
        (cfg.image, cfg.text)
    }

    #[test]
    fn block_flops_hand_expansion() {
        assert_eq!(block_flops(1, 4, 2), 416);
    }

    #[test]
    fn doubling_tokens_in_linear_regime_doubles_flops() {
        // d >> n so the n² term is negligible
        let f1 = block_flops(2, 512, 4) as f64;
        let f2 = block_flops(2, 512, 8) as f64;
        assert!((f2 / f1 - 2.0).abs() < 0.02, "ratio {}", f2 / f1);
    }

    #[test]
    fn h14_image_tower_magnitude() {
        let (img, _) = h14();
        let f = encoder_flops(&img, 257) as f64;
        assert!((f - 162e9).abs() / 162e9 < 0.15, "{f:.3e}");
    }

    #[test]
    fn table_level_absolute_and_ratio_pins() {
        let (img, txt) = h14();
        let f224 = training_flops_per_sample(&img, &txt, 224, 0.0, 32).unwrap() as f64;
        assert!((f224 - 177.0e9).abs() / 177.0e9 < 0.15, "{f224:.4e}");

        let f224_r30 = training_flops_per_sample(&img, &txt, 224, 0.3, 32).unwrap() as f64;
        let got = f224_r30 / f224;
        let want = 135.9 / 177.0;
        assert!((got - want).abs() / want < 0.10, "got {got:.4}, want {want:.4}");

        let f336_r40 = training_flops_per_sample(&img, &txt, 336, 0.4, 32).unwrap() as f64;
        let got = f336_r40 / f224;
        let want = 237.8 / 177.0;
        assert!((got - want).abs() / want < 0.10, "got {got:.4}, want {want:.4}");
    }

    #[test]
    fn monotone_in_resolution_and_mask_ratio() {
        let (img, txt) = h14();
        let mut last = 0;
        for side in [84, 112, 224, 336] {
            let f = training_flops_per_sample(&img, &txt, side, 0.0, 32).unwrap();
            assert!(f > last);
            last = f;
        }
        let mut last = u64::MAX;
        for r in [0.0, 0.25, 0.5, 0.75] {
            let f = training_flops_per_sample(&img, &txt, 224, r, 32).unwrap();
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn counter_agreement_is_exact_across_masks_and_text() {
        use crate::mask::{make_random_mask, truncate_text};
        use crate::model::{encode_image_batch, encode_text_batch, ClipModel, ImageSample, TextSample};
        use crate::rng::SplitMix64;
        use crate::tensor::{Graph, Precision};

        let cfg = toy_pair(64, 16);
        let model = ClipModel::new(cfg.clone(), 32, 3).unwrap();
        let n = 16; // 32px at patch 8 → 4x4 grid
        let patch_dim = 8 * 8 * 3;
        let mut rng = SplitMix64::new(50);
        let patches: Vec<f64> = (0..n * patch_dim).map(|_| rng.next_f64()).collect();

        for r in [0.0, 0.25, 0.5, 0.7] {
            for text_len in [4usize, 16] {
                let mut g = Graph::new(Precision::F32);
                let nodes = model.leaf_params(&mut g, false);
                let img_sample = ImageSample {
                    patches: patches.clone(),
                    n_tokens: n,
                    mask: make_random_mask(4, 4, r, 1, 0).unwrap(),
                };
                encode_image_batch(&mut g, &nodes, &cfg.image, &[img_sample]).unwrap();
                let (ids, real) = truncate_text(&[5, 9, 2], text_len, 0);
                let txt_sample = TextSample { ids, real };
                encode_text_batch(&mut g, &nodes, &cfg.text, &[txt_sample]).unwrap();

                let analytical =
                    training_flops_per_sample(&cfg.image, &cfg.text, 32, r, text_len).unwrap();
                assert_eq!(
                    g.macs(),
                    analytical,
                    "counter vs formula diverged at r={r}, text_len={text_len}"
                );
            }
        }
    }

    fn paper_stage(side: usize, ratio: f64, samples: u64, text_len: usize) -> StageConfig {
        StageConfig {
            image_side: side,
            mask: MaskSpec::new(
                if ratio == 0.0 {
                    MaskStrategy::None
                } else {
                    MaskStrategy::Random
                },
                ratio,
                0,
            )
            .unwrap(),
            text_len,
            samples_seen: samples,
            batch_size: 32768,
            peak_lr: 1e-3,
            warmup_samples: 0,
            lr_floor: 0.0,
            weight_decay: 0.2,
        }
    }

    #[test]
    fn plan_compute_scales_linearly_and_blends_finetune_stages() {
        let clip = flops_preset("H/14").unwrap();
        let base = TrainPlan {
            clip: clip.clone(),
            stages: vec![
                paper_stage(84, 0.0, 2_560_000_000, 8),
                paper_stage(224, 0.3, 512_000_000, 32),
                paper_stage(336, 0.4, 128_000_000, 32),
            ],
            seed: 0,
        };
        let report = plan_compute(&base, 1).unwrap();
        assert_eq!(
            report.total_flops,
            report.stages.iter().map(|s| s.stage_flops).sum::<u128>()
        );

        // 5x the pretrain samples => that stage's compute exactly 5x
        let mut scaled = base.clone();
        scaled.stages[0].samples_seen *= 5;
        let report5 = plan_compute(&scaled, 1).unwrap();
        assert_eq!(report5.stages[0].stage_flops, 5 * report.stages[0].stage_flops);
        assert_eq!(report5.stages[1].stage_flops, report.stages[1].stage_flops);

        // blended finetune average vs the 224²/0% baseline, paper-ratio check
        let blended = report.blended_finetune_flops_per_sample.unwrap();
        let f224 =
            training_flops_per_sample(&clip.image, &clip.text, 224, 0.0, 32).unwrap() as f64;
        let got = blended / f224;
        let want = 156.3 / 177.0;
        assert!((got - want).abs() / want < 0.10, "got {got:.4}, want {want:.4}");

        // empty plan costs zero
        let empty = TrainPlan {
            clip,
            stages: vec![],
            seed: 0,
        };
        let z = plan_compute(&empty, 1).unwrap();
        assert_eq!(z.total_flops, 0);
        assert!(z.blended_finetune_flops_per_sample.is_none());
    }

    #[test]
    fn plan_compute_additive_over_concatenation() {
        let clip = toy_pair(64, 16);
        let a = TrainPlan {
            clip: clip.clone(),
            stages: vec![paper_stage(16, 0.5, 1000, 8)],
            seed: 0,
        };
        let b = TrainPlan {
            clip: clip.clone(),
            stages: vec![paper_stage(32, 0.0, 500, 16)],
            seed: 0,
        };
        let ab = TrainPlan {
            clip,
            stages: [a.stages.clone(), b.stages.clone()].concat(),
            seed: 0,
        };
        let (ra, rb, rab) = (
            plan_compute(&a, 1).unwrap(),
            plan_compute(&b, 1).unwrap(),
            plan_compute(&ab, 1).unwrap(),
        );
        assert_eq!(rab.total_flops, ra.total_flops + rb.total_flops);
    }

    #[test]
    fn dollar_cost_examples_and_linearity() {
        let rate = RateCard::new(1.575, "cloud list price").unwrap();
        assert_eq!(dollar_cost(5920.0, &rate).unwrap().display, 9324);
        let c = dollar_cost(7776.0, &rate).unwrap();
        assert_eq!(c.display, 12247);
        assert!((c.exact - 12247.2).abs() < 1e-6);
        assert_eq!(dollar_cost(0.0, &rate).unwrap().display, 0);
        assert!(dollar_cost(-1.0, &rate).is_err());
        assert!(RateCard::new(0.0, "x").is_err());

        let a = dollar_cost(123.45, &rate).unwrap().exact;
        let b = dollar_cost(678.9, &rate).unwrap().exact;
        let ab = dollar_cost(123.45 + 678.9, &rate).unwrap().exact;
        assert!((ab - (a + b)).abs() < 1e-9);
    }

    #[test]
    fn comparison_report_ratios() {
        let rows = vec![
            CompareRow {
                label: "large baseline".into(),
                gpu_hours: 232_448.0,
                rate: Some(1.575),
                given_cost: None,
                metrics: vec![("top1".into(), 83.0)],
            },
            CompareRow {
                label: "ours".into(),
                gpu_hours: 5_920.0,
                rate: Some(1.575),
                given_cost: None,
                metrics: vec![("top1".into(), 81.1)],
            },
        ];
        let report = comparison_report(&rows, None).unwrap();
        assert_eq!(report.baseline, "ours");
        let big = &report.rows[0];
        assert!((big.hours_ratio.unwrap() - 39.2648).abs() < 1e-3);
        assert_eq!(big.ratio_label.as_deref(), Some("≈39×"));
        assert_eq!(report.rows[1].ratio_label.as_deref(), Some("1×"));
        assert_eq!(report.rows[1].cost_display, Some(9324));

        let single = comparison_report(&rows[..1], None).unwrap();
        assert!(single.rows[0].hours_ratio.is_none());

        let equal = vec![rows[0].clone(), rows[0].clone()];
        let eq = comparison_report(&equal, None).unwrap();
        assert!((eq.rows[0].hours_ratio.unwrap() - 1.0).abs() < 1e-12);

        assert!(matches!(
            comparison_report(&[], None),
            Err(CostError::NoRows)
        ));
        assert!(matches!(
            comparison_report(&rows, Some("nope")),
            Err(CostError::BadBaseline(_))
        ));
    }
}
