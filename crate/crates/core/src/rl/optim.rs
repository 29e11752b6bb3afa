//! AdamW with global gradient-norm clipping and warmup schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    LinearWarmup,
    WarmupCosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: LrDecay,
}

/// Fraction of the base rate the cosine schedule ends at.
pub const COSINE_FLOOR: f64 = 0.1;

impl Schedule {
    /// Learning rate for the 1-based update `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (step as f64 / self.warmup as f64).min(1.0)
        };
        let decay = match self.decay {
            LrDecay::LinearWarmup => 1.0,
            LrDecay::WarmupCosine => {
                if step <= self.warmup || self.total <= self.warmup {
                    1.0
                } else {
                    let progress =
                        ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
                    COSINE_FLOOR
                        + (1.0 - COSINE_FLOOR)
                            * 0.5
                            * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        };
        self.base * warm * decay
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: Some(0.25),
        }
    }
}

/// Factor applied to every gradient so the global norm is at most `clip`.
pub fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` (one buffer per parameter in visiting order), then
    /// applies one decoupled-weight-decay Adam update. Returns the
    /// pre-clipping global norm.
    pub fn step<P: Parameters + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &mut [Vec<f64>],
        lr: f64,
    ) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::invalid(format!("non-finite gradient norm {norm}")));
        }
        let scale = clip_factor(norm, self.config.grad_clip);
        if scale != 1.0 {
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamWConfig {
            betas: (b1, b2),
            eps,
            weight_decay,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        let mut mismatch = None;
        params.visit_mut("", &mut |name, t| {
            let (Some(g), Some(mi), Some(vi)) = (grads.get(i), m.get_mut(i), v.get_mut(i)) else {
                mismatch.get_or_insert(name);
                return;
            };
            if g.len() != t.numel() {
                mismatch.get_or_insert(name);
                return;
            }
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                *p -= lr * weight_decay * *p;
                mi[j] = b1 * mi[j] + (1.0 - b1) * g[j];
                vi[j] = b2 * vi[j] + (1.0 - b2) * g[j] * g[j];
                *p -= lr * (mi[j] / c1) / ((vi[j] / c2).sqrt() + eps);
            }
            i += 1;
        });
        if let Some(name) = mismatch {
            return Err(Error::invalid(format!(
                "gradient buffers do not match parameter {name}"
            )));
        }
        if i != grads.len() {
            return Err(Error::invalid(format!(
                "{} gradient buffers for {i} parameters",
                grads.len()
            )));
        }
        Ok(norm)
    }
}
