//! The offline training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, DecisionMambaConfig, DecisionMambaParams};
use crate::nn::{Mode, Parameters};
use crate::rl::batch::{Sampler, StateNorm};
use crate::rl::data::Dataset;
use crate::rl::loss::{action_loss, LossKind};
use crate::rl::optim::{AdamW, AdamWConfig, LrDecay, Schedule};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: DecisionMambaConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_updates: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub lr_decay: LrDecay,
    pub betas: (f64, f64),
    pub target_rtg: Option<f64>,
    pub eval_episodes: usize,
    pub rtg_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: DecisionMambaConfig::default(),
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 500,
            total_updates: 5000,
            grad_clip: 0.25,
            lr_decay: LrDecay::LinearWarmup,
            betas: (0.9, 0.999),
            target_rtg: None,
            eval_episodes: 20,
            rtg_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bad.push("learning_rate");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push("weight_decay");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            bad.push("grad_clip");
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(beta_ok(self.betas.0) && beta_ok(self.betas.1)) {
            bad.push("betas");
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            bad.push("rtg_scale");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid values for: {}",
                bad.join(", ")
            )))
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base: self.learning_rate,
            warmup: self.warmup_steps,
            total: self.total_updates,
            decay: self.lr_decay,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.model.action_space.is_discrete() {
            LossKind::Ce
        } else {
            LossKind::Mse
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_norm,lr";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.grad_norm, self.lr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: DecisionMambaParams,
    pub metrics: Vec<MetricRow>,
    pub norm: StateNorm,
}

/// Standardization used for a dataset: fitted for real-valued states,
/// identity for one-hot ones.
pub fn state_norm_for(dataset: &Dataset) -> StateNorm {
    if dataset.meta.env.continuous_states() {
        StateNorm::fit(dataset)
    } else {
        StateNorm::identity(dataset.meta.state_dim)
    }
}

fn check_compatible(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if cfg.model.state_dim != dataset.meta.state_dim {
        return Err(Error::Config(format!(
            "state_dim {} does not match the dataset's {}",
            cfg.model.state_dim, dataset.meta.state_dim
        )));
    }
    if cfg.model.action_space != dataset.meta.action_space {
        return Err(Error::Config(format!(
            "action_space {:?} does not match the dataset's {:?}",
            cfg.model.action_space, dataset.meta.action_space
        )));
    }
    let longest = dataset
        .trajectories
        .iter()
        .map(|t| t.len())
        .max()
        .unwrap_or(0);
    if longest > cfg.model.max_timestep {
        return Err(Error::Config(format!(
            "max_timestep {} is shorter than the longest trajectory ({longest})",
            cfg.model.max_timestep
        )));
    }
    Ok(())
}

/// Trains from freshly initialized parameters; `on_step` sees every row as
/// it is produced.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_compatible(cfg, dataset)?;
    let mut params = init_params(&cfg.model, &mut stream(cfg.seed, Stream::Init))?;
    let norm = state_norm_for(dataset);
    let sampler = Sampler::new(dataset, norm.clone(), cfg.rtg_scale)?;
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut opt = AdamW::new(cfg.optimizer());
    let schedule = cfg.schedule();
    let kind = cfg.loss_kind();
    let mut metrics = Vec::with_capacity(cfg.total_updates);
    for step in 1..=cfg.total_updates {
        let batch = sampler.sample(cfg.model.context_length, cfg.batch_size, &mut data_rng)?;
        let (loss, mut grads) = {
            let tape = Tape::new();
            let pred = forward(
                &tape,
                &batch,
                &params,
                &cfg.model,
                Mode::Train,
                &mut dropout_rng,
            )?;
            let loss = action_loss(pred, &batch.actions, &batch.mask, kind)?;
            loss.backward()?;
            let mut grads = Vec::new();
            params.visit("", &mut |_, t| {
                grads.push(tape.param_grad(t).unwrap_or_else(|| vec![0.0; t.numel()]));
            });
            let value = loss.value().item();
            (value, grads)
        };
        if !loss.is_finite() {
            return Err(Error::invalid(format!(
                "loss became non-finite at update {step}"
            )));
        }
        let lr = schedule.lr(step);
        let grad_norm = opt.step(&mut params, &mut grads, lr)?;
        let row = MetricRow {
            step,
            loss,
            grad_norm,
            lr,
        };
        on_step(&row);
        metrics.push(row);
    }
    Ok(TrainOutput {
        params,
        metrics,
        norm,
    })
}

/// Mean training loss over updates `from..to` (1-based, half-open).
pub fn mean_loss(metrics: &[MetricRow], from: usize, to: usize) -> f64 {
    let sel: Vec<f64> = metrics
        .iter()
        .filter(|m| m.step >= from && m.step < to)
        .map(|m| m.loss)
        .collect();
    sel.iter().sum::<f64>() / sel.len().max(1) as f64
}
