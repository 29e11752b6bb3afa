//! Toy environments, their exact optima and behaviour policies for dataset
//! generation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActionSpace;
use crate::rl::data::{Action, Dataset, DatasetMeta, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Env {
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<Step>;
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    #[serde(rename = "densechain")]
    DenseChain {
        n: usize,
        horizon: usize,
    },
    #[serde(rename = "delayedcatch")]
    DelayedCatch {
        n: usize,
        horizon: usize,
    },
    Point1d {
        horizon: usize,
    },
}

impl EnvSpec {
    pub const NAMES: [&'static str; 3] = ["densechain", "delayedcatch", "point1d"];

    /// Builds a spec from its name; `n` is ignored by `point1d`.
    pub fn from_name(name: &str, n: usize, horizon: usize) -> Result<Self> {
        let spec = match name {
            "densechain" => EnvSpec::DenseChain { n, horizon },
            "delayedcatch" => EnvSpec::DelayedCatch { n, horizon },
            "point1d" => EnvSpec::Point1d { horizon },
            other => {
                return Err(Error::Config(format!(
                    "unknown environment '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::DenseChain { .. } => "densechain",
            EnvSpec::DelayedCatch { .. } => "delayedcatch",
            EnvSpec::Point1d { .. } => "point1d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, h) = match *self {
            EnvSpec::DenseChain { n, horizon } | EnvSpec::DelayedCatch { n, horizon } => {
                (n, horizon)
            }
            EnvSpec::Point1d { horizon } => (2, horizon),
        };
        if n < 2 {
            return Err(Error::Env(format!(
                "chain length must be at least 2, got {n}"
            )));
        }
        if h < 1 {
            return Err(Error::Env("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::DenseChain { horizon, .. }
            | EnvSpec::DelayedCatch { horizon, .. }
            | EnvSpec::Point1d { horizon } => horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        match *self {
            EnvSpec::DenseChain { n, .. } | EnvSpec::DelayedCatch { n, .. } => n,
            EnvSpec::Point1d { .. } => 1,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvSpec::Point1d { .. } => ActionSpace::Continuous(1),
            _ => ActionSpace::Discrete(2),
        }
    }

    /// Whether states are real-valued (and therefore standardized for
    /// training) rather than one-hot.
    pub fn continuous_states(&self) -> bool {
        matches!(self, EnvSpec::Point1d { .. })
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        self.validate()?;
        Ok(match *self {
            EnvSpec::DenseChain { n, horizon } => Box::new(Chain::new(n, horizon, false)),
            EnvSpec::DelayedCatch { n, horizon } => Box::new(Chain::new(n, horizon, true)),
            EnvSpec::Point1d { horizon } => Box::new(Point1d::new(horizon)),
        })
    }

    /// Best achievable return: dynamic programming over (position, step) for
    /// the chains; zero for `point1d` from its default start.
    pub fn optimal_return(&self) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            EnvSpec::DenseChain { n, horizon } => Chain::new(n, horizon, false).values()[0][0],
            EnvSpec::DelayedCatch { n, horizon } => Chain::new(n, horizon, true).values()[0][0],
            EnvSpec::Point1d { .. } => 0.0,
        })
    }

    /// The optimal action at timestep `t` given the observation.
    pub fn optimal_action(&self, obs: &[f64], t: usize) -> Result<Action> {
        match *self {
            EnvSpec::DenseChain { n, horizon } | EnvSpec::DelayedCatch { n, horizon } => {
                let chain = Chain::new(n, horizon, matches!(self, EnvSpec::DelayedCatch { .. }));
                let pos = one_hot_index(obs)?;
                if t >= horizon {
                    return Err(Error::Env(format!("timestep {t} beyond horizon {horizon}")));
                }
                let v = chain.values();
                let q = |a: usize| {
                    let (next, r) = chain.transition(pos, a, t);
                    r + v[t + 1][next]
                };
                // prefer moving right on ties
                Ok(Action::Discrete(if q(1) >= q(0) { 1 } else { 0 }))
            }
            EnvSpec::Point1d { .. } => {
                let x = obs
                    .first()
                    .copied()
                    .ok_or_else(|| Error::Env("empty observation".into()))?;
                Ok(Action::Continuous(vec![(-x / POINT_STEP).clamp(-1.0, 1.0)]))
            }
        }
    }

    pub fn random_action(&self, rng: &mut dyn RngCore) -> Action {
        match self.action_space() {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous(d) => {
                Action::Continuous((0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
            }
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EnvSpec::DenseChain { n, horizon } | EnvSpec::DelayedCatch { n, horizon } => {
                write!(f, "{}(n={n}, H={horizon})", self.name())
            }
            EnvSpec::Point1d { horizon } => write!(f, "point1d(H={horizon})"),
        }
    }
}

fn one_hot_index(obs: &[f64]) -> Result<usize> {
    let mut hot = obs.iter().enumerate().filter(|(_, &v)| v != 0.0);
    match (hot.next(), hot.next()) {
        (Some((i, 1.0)), None) => Ok(i),
        _ => Err(Error::Env(format!("observation {obs:?} is not one-hot"))),
    }
}

/// A line of `n` cells. Action 1 moves right, 0 moves left. In the dense
/// variant a right move pays 0.1, or 1.0 when already at the right edge; in
/// the delayed variant the only reward is `position / (n - 1)` at the final
/// step.
#[derive(Clone, Debug)]
pub struct Chain {
    n: usize,
    horizon: usize,
    delayed: bool,
    pos: usize,
    t: usize,
}

impl Chain {
    pub fn new(n: usize, horizon: usize, delayed: bool) -> Self {
        Chain {
            n,
            horizon,
            delayed,
            pos: 0,
            t: 0,
        }
    }

    fn transition(&self, pos: usize, action: usize, t: usize) -> (usize, f64) {
        let edge = self.n - 1;
        let (next, dense) = if action == 1 {
            if pos == edge {
                (pos, 1.0)
            } else {
                (pos + 1, 0.1)
            }
        } else {
            (pos.saturating_sub(1), 0.0)
        };
        if self.delayed {
            let r = if t + 1 == self.horizon {
                next as f64 / edge as f64
            } else {
                0.0
            };
            (next, r)
        } else {
            (next, dense)
        }
    }

    /// `v[t][s]`: optimal return-to-go from position `s` at step `t`.
    fn values(&self) -> Vec<Vec<f64>> {
        let mut v = vec![vec![0.0; self.n]; self.horizon + 1];
        for t in (0..self.horizon).rev() {
            for s in 0..self.n {
                v[t][s] = (0..2)
                    .map(|a| {
                        let (next, r) = self.transition(s, a, t);
                        r + v[t + 1][next]
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        v
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.n];
        o[self.pos] = 1.0;
        o
    }
}

impl Env for Chain {
    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.pos = 0;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.t >= self.horizon {
            return Err(Error::Env("step called after the episode ended".into()));
        }
        let a = match action {
            Action::Discrete(a) if *a < 2 => *a,
            other => return Err(Error::Env(format!("invalid chain action {other:?}"))),
        };
        let (next, reward) = self.transition(self.pos, a, self.t);
        self.pos = next;
        self.t += 1;
        Ok(Step {
            state: self.observe(),
            reward,
            done: self.t == self.horizon,
        })
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

const POINT_STEP: f64 = 0.1;

/// A point on `[-1, 1]` pushed by `0.1·a`, paying `-x²` after each move.
#[derive(Clone, Debug)]
pub struct Point1d {
    horizon: usize,
    /// Fixed start; `None` draws uniformly from `[-1, 1]` on reset.
    pub start: Option<f64>,
    x: f64,
    t: usize,
}

impl Point1d {
    pub fn new(horizon: usize) -> Self {
        Point1d {
            horizon,
            start: None,
            x: 0.0,
            t: 0,
        }
    }
}

impl Env for Point1d {
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.x = match self.start {
            Some(x) => x.clamp(-1.0, 1.0),
            None => rng.random_range(-1.0..=1.0),
        };
        self.t = 0;
        vec![self.x]
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.t >= self.horizon {
            return Err(Error::Env("step called after the episode ended".into()));
        }
        let a = match action {
            Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => v[0].clamp(-1.0, 1.0),
            other => return Err(Error::Env(format!("invalid point1d action {other:?}"))),
        };
        self.x = (self.x + POINT_STEP * a).clamp(-1.0, 1.0);
        self.t += 1;
        Ok(Step {
            state: vec![self.x],
            reward: -self.x * self.x,
            done: self.t == self.horizon,
        })
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(1)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Behaviour policy used to generate offline data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    Optimal,
    /// Optimal action with probability `1 - p`, uniform otherwise.
    Epsilon(f64),
    Random,
}

impl Policy {
    pub fn act(
        &self,
        spec: &EnvSpec,
        obs: &[f64],
        t: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Action> {
        match *self {
            Policy::Optimal => spec.optimal_action(obs, t),
            Policy::Random => Ok(spec.random_action(rng)),
            Policy::Epsilon(p) => {
                if rng.random::<f64>() < p {
                    Ok(spec.random_action(rng))
                } else {
                    spec.optimal_action(obs, t)
                }
            }
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown policy '{s}' (expected optimal, random or epsilon(p))"
            ))
        };
        match s {
            "optimal" => Ok(Policy::Optimal),
            "random" => Ok(Policy::Random),
            _ => {
                let inner = s
                    .strip_prefix("epsilon(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("epsilon:"))
                    .ok_or_else(bad)?;
                let p: f64 = inner.trim().parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("epsilon {p} outside [0, 1]")));
                }
                Ok(Policy::Epsilon(p))
            }
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Optimal => f.write_str("optimal"),
            Policy::Random => f.write_str("random"),
            Policy::Epsilon(p) => write!(f, "epsilon({p})"),
        }
    }
}

pub fn run_episode(spec: &EnvSpec, policy: Policy, rng: &mut dyn RngCore) -> Result<Trajectory> {
    let mut env = spec.build()?;
    let mut traj = Trajectory::new(spec.action_space());
    let mut obs = env.reset(rng);
    for t in 0..env.horizon() {
        let a = policy.act(spec, &obs, t, rng)?;
        let step = env.step(&a)?;
        traj.observations
            .push(std::mem::replace(&mut obs, step.state));
        traj.actions.push(a)?;
        traj.rewards.push(step.reward);
        if step.done {
            break;
        }
    }
    traj.observations.push(obs);
    Ok(traj)
}

pub fn gen_dataset(
    spec: &EnvSpec,
    policy: Policy,
    episodes: usize,
    seed: u64,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    let trajectories = (0..episodes)
        .map(|_| run_episode(spec, policy, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            env: *spec,
            state_dim: spec.state_dim(),
            action_space: spec.action_space(),
            generator: policy.to_string(),
            seed,
        },
        trajectories,
    })
}

/// Mean and standard error of the uniform-random policy's return.
pub fn random_baseline(
    spec: &EnvSpec,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let returns = (0..episodes)
        .map(|_| run_episode(spec, Policy::Random, rng).map(|t| t.total_return()))
        .collect::<Result<Vec<_>>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    /// Best return by enumerating every action sequence.
    fn brute_force(spec: &EnvSpec) -> f64 {
        let h = spec.horizon();
        let mut best = f64::NEG_INFINITY;
        for bits in 0u32..(1 << h) {
            let mut env = spec.build().unwrap();
            env.reset(&mut stream(0, Stream::Eval));
            let total: f64 = (0..h)
                .map(|t| {
                    env.step(&Action::Discrete(((bits >> t) & 1) as usize))
                        .unwrap()
                        .reward
                })
                .sum();
            best = best.max(total);
        }
        best
    }

    #[test]
    fn dp_matches_exhaustive_search() {
        for spec in [
            EnvSpec::DenseChain { n: 6, horizon: 10 },
            EnvSpec::DenseChain { n: 3, horizon: 7 },
            EnvSpec::DelayedCatch { n: 6, horizon: 12 },
            EnvSpec::DelayedCatch { n: 6, horizon: 4 },
        ] {
            let dp = spec.optimal_return().unwrap();
            assert!((dp - brute_force(&spec)).abs() < 1e-12, "{spec}");
        }
        assert!(
            (EnvSpec::DenseChain { n: 6, horizon: 10 }
                .optimal_return()
                .unwrap()
                - 5.5)
                .abs()
                < 1e-12
        );
        assert!(
            (EnvSpec::DelayedCatch { n: 6, horizon: 4 }
                .optimal_return()
                .unwrap()
                - 0.8)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn optimal_policy_attains_optimum() {
        let spec = EnvSpec::DenseChain { n: 6, horizon: 10 };
        let d = gen_dataset(
            &spec,
            Policy::Optimal,
            5,
            1,
            &mut stream(1, Stream::Generate),
        )
        .unwrap();
        assert_eq!(d.trajectories.len(), 5);
        for t in &d.trajectories {
            assert!((t.total_return() - 5.5).abs() < 1e-12);
            assert_eq!(t.observations.len(), 11);
        }
    }

    #[test]
    fn random_policy_matches_baseline() {
        let spec = EnvSpec::DelayedCatch { n: 6, horizon: 12 };
        let (mean, se) = random_baseline(&spec, 20_000, &mut stream(2, Stream::Eval)).unwrap();
        let d = gen_dataset(
            &spec,
            Policy::Random,
            4000,
            2,
            &mut stream(3, Stream::Generate),
        )
        .unwrap();
        let r = d.returns();
        let m2 = r.iter().sum::<f64>() / r.len() as f64;
        let se2 =
            (r.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / r.len() as f64 / r.len() as f64)
                .sqrt();
        assert!(
            (mean - m2).abs() < 4.0 * (se * se + se2 * se2).sqrt(),
            "{mean} {m2}"
        );
    }

    #[test]
    fn empty_dataset() {
        let spec = EnvSpec::Point1d { horizon: 5 };
        let d = gen_dataset(
            &spec,
            Policy::Random,
            0,
            0,
            &mut stream(0, Stream::Generate),
        )
        .unwrap();
        assert!(d.trajectories.is_empty());
    }

    #[test]
    fn point1d_idle_from_origin() {
        let mut env = Point1d::new(8);
        env.start = Some(0.0);
        env.reset(&mut stream(0, Stream::Eval));
        let mut total = 0.0;
        for _ in 0..8 {
            total += env.step(&Action::Continuous(vec![0.0])).unwrap().reward;
        }
        assert_eq!(total, 0.0);
        assert!(env.step(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn invalid_specs_and_policies() {
        assert!(EnvSpec::from_name("densechain", 1, 5).is_err());
        assert!(EnvSpec::from_name("densechain", 4, 0).is_err());
        assert!(EnvSpec::from_name("gridworld", 4, 4).is_err());
        assert_eq!(
            "epsilon(0.3)".parse::<Policy>().unwrap(),
            Policy::Epsilon(0.3)
        );
        assert_eq!(Policy::Epsilon(0.3).to_string(), "epsilon(0.3)");
        assert!("epsilon(2)".parse::<Policy>().is_err());
        assert!("greedy".parse::<Policy>().is_err());
    }

    #[test]
    fn spec_json_shape() {
        let s = serde_json::to_string(&EnvSpec::DenseChain { n: 6, horizon: 10 }).unwrap();
        assert_eq!(s, r#"{"kind":"densechain","n":6,"horizon":10}"#);
        let back: EnvSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, EnvSpec::DenseChain { n: 6, horizon: 10 });
    }
}
