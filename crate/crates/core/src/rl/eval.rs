//! Return-conditioned rollouts.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::{predict, ActionSpace, DecisionMambaConfig, DecisionMambaParams};
use crate::rl::batch::{Batch, StateNorm};
use crate::rl::data::Action;
use crate::rl::env::EnvSpec;
use crate::tensor::Tensor;

/// The interaction so far in one episode. Entry `i` of each list belongs to
/// step `i`; the current step has an RTG and a state but no action yet.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl History {
    pub fn step(&self) -> usize {
        self.states.len() - 1
    }
}

pub trait Agent {
    fn act(&mut self, history: &History, rng: &mut dyn RngCore) -> Result<Action>;
}

/// A trained network acting on the last `K` steps of the history.
pub struct ModelAgent<'a> {
    pub params: &'a DecisionMambaParams,
    pub config: &'a DecisionMambaConfig,
    pub norm: &'a StateNorm,
    pub rtg_scale: f64,
    /// Softmax sampling temperature for discrete actions; `None` is argmax.
    pub temperature: Option<f64>,
}

impl ModelAgent<'_> {
    /// Input window: the most recent `≤ K` steps, unpadded, with the
    /// current action slot zeroed.
    pub fn window(&self, h: &History) -> Batch {
        let cfg = self.config;
        let now = h.step();
        let start = (now + 1).saturating_sub(cfg.context_length);
        let w = now + 1 - start;
        let (s, a) = (cfg.state_dim, cfg.action_space.input_dim());
        let mut states = vec![0.0; w * s];
        let mut actions = vec![0.0; w * a];
        for (j, i) in (start..=now).enumerate() {
            self.norm
                .apply(&h.states[i], &mut states[j * s..(j + 1) * s]);
            if i < now {
                actions[j * a..(j + 1) * a].copy_from_slice(&h.actions[i].encode());
            }
        }
        Batch {
            rtg: Tensor::from_parts(
                vec![1, w, 1],
                h.rtg[start..=now]
                    .iter()
                    .map(|r| r / self.rtg_scale)
                    .collect(),
            ),
            states: Tensor::from_parts(vec![1, w, s], states),
            actions: Tensor::from_parts(vec![1, w, a], actions),
            timesteps: (start..=now).collect(),
            mask: Tensor::ones(vec![1, w]),
        }
    }
}

impl Agent for ModelAgent<'_> {
    fn act(&mut self, h: &History, rng: &mut dyn RngCore) -> Result<Action> {
        let b = self.window(h);
        let w = b.context();
        let out = predict(&b, self.params, self.config)?;
        let width = self.config.action_space.head_dim();
        let last = &out.data()[(w - 1) * width..w * width];
        Ok(match self.config.action_space {
            ActionSpace::Continuous(_) => Action::Continuous(last.to_vec()),
            ActionSpace::Discrete(_) => Action::Discrete(match self.temperature {
                None => argmax(last),
                Some(t) => sample_softmax(last, t, rng)?,
            }),
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(logits: &[f64], temperature: f64, rng: &mut dyn RngCore) -> Result<usize> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|l| ((l - m) / temperature).exp())
        .collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return Ok(i);
        }
        u -= wi;
    }
    Ok(w.len() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub total_return: f64,
    pub rewards: Vec<f64>,
    /// The RTG fed to the agent at each step.
    pub rtg: Vec<f64>,
}

/// Runs `episodes` episodes conditioned on `target_rtg`, subtracting each
/// reward from the running RTG.
pub fn rollout(
    spec: &EnvSpec,
    agent: &mut dyn Agent,
    target_rtg: f64,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = spec.build()?;
        let mut h = History {
            rtg: vec![target_rtg],
            states: vec![env.reset(rng)],
            actions: Vec::new(),
        };
        let mut rewards = Vec::new();
        for _ in 0..env.horizon() {
            let a = agent.act(&h, rng)?;
            let step = env.step(&a)?;
            rewards.push(step.reward);
            h.actions.push(a);
            if step.done {
                break;
            }
            let rtg = h.rtg.last().copied().unwrap_or(target_rtg) - step.reward;
            h.rtg.push(rtg);
            h.states.push(step.state);
        }
        out.push(Episode {
            total_return: rewards.iter().sum(),
            rewards,
            rtg: h.rtg,
        });
    }
    Ok(out)
}

/// An agent that ignores the RTG and plays the environment's optimal action.
pub struct OracleAgent(pub EnvSpec);

impl Agent for OracleAgent {
    fn act(&mut self, h: &History, _rng: &mut dyn RngCore) -> Result<Action> {
        self.0.optimal_action(&h.states[h.step()], h.step())
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
