//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! warmup + cosine learning-rate schedule.

use crate::error::TrainError;
use crate::model::ParamSet;

pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.95);
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.2;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Weight decay hits weight matrices only: rank-1 vectors (biases, norm
/// gains), positional/class embeddings, and the temperature are exempt.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && name != "logit_t" && !name.ends_with(".pos") && !name.ends_with(".class")
}

/// Euclidean norm over every gradient element at once.
pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
        clip_norm: Option<f64>,
    ) -> Result<Self, TrainError> {
        for (label, x) in [("beta1", betas.0), ("beta2", betas.1)] {
            if !(0.0..1.0).contains(&x) {
                return Err(TrainError::BadHyper(format!("{label} = {x}, need [0, 1)")));
            }
        }
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TrainError::BadHyper(format!("eps = {eps}, need > 0")));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(TrainError::BadHyper(format!("weight_decay = {weight_decay}")));
        }
        if let Some(c) = clip_norm {
            if c <= 0.0 || !c.is_finite() {
                return Err(TrainError::BadHyper(format!("clip_norm = {c}, need > 0")));
            }
        }
        Ok(Self {
            betas,
            eps,
            weight_decay,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn defaults() -> Self {
        Self::new(
            DEFAULT_BETAS,
            DEFAULT_EPS,
            DEFAULT_WEIGHT_DECAY,
            Some(DEFAULT_CLIP_NORM),
        )
        .expect("default hyperparameters are valid")
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is parallel to `params` (same order, same shapes).
    /// Clips to the global norm, then per element:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        m̂ = m/(1−β₁ᵗ)
    /// v ← β₂v + (1−β₂)g²       v̂ = v/(1−β₂ᵗ)
    /// p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p    (wd on decaying params only)
    /// ```
    ///
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &mut [Vec<f64>],
        lr: f64,
    ) -> Result<f64, TrainError> {
        if grads.len() != params.len() {
            return Err(TrainError::BadHyper(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                params.len()
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(TrainError::BadHyper(format!("lr = {lr}")));
        }
        for ((name, tensor), grad) in params.iter().zip(grads.iter()) {
            if grad.len() != tensor.data().len() {
                return Err(TrainError::BadHyper(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    grad.len(),
                    tensor.data().len()
                )));
            }
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    name: name.to_string(),
                });
            }
        }
        // lazy init; a reshaped parameter (e.g. re-gridded positional
        // embedding between stages) restarts its moments from zero
        self.m.resize(grads.len(), Vec::new());
        self.v.resize(grads.len(), Vec::new());
        for (i, g) in grads.iter().enumerate() {
            if self.m[i].len() != g.len() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
        }

        let norm = global_grad_norm(grads);
        if let Some(clip) = self.clip_norm {
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut() {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }

        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let wd = if decays(name, tensor.shape().len()) {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps) + lr * wd * *p;
            }
        }
        Ok(norm)
    }
}

/// Linear warmup `0 → peak` over `warmup_steps`, then cosine decay
/// `peak → floor` over the remaining steps.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, peak: f64, floor: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return floor;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
