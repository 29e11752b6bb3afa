//! Trajectories, return-to-go and the JSON-Lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActionSpace;
use crate::rl::env::EnvSpec;

/// A single action: a class index or a real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Row written into a batch: the class index, or the vector itself.
    pub fn encode(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete(v) => v.len(),
            Actions::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Action {
        match self {
            Actions::Discrete(v) => Action::Discrete(v[i]),
            Actions::Continuous(v) => Action::Continuous(v[i].clone()),
        }
    }

    pub fn push(&mut self, a: Action) -> Result<()> {
        match (self, a) {
            (Actions::Discrete(v), Action::Discrete(a)) => v.push(a),
            (Actions::Continuous(v), Action::Continuous(a)) => v.push(a),
            (_, a) => {
                return Err(Error::invalid(format!(
                    "action {a:?} does not match the trajectory's kind"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Actions,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(space: ActionSpace) -> Self {
        Trajectory {
            observations: Vec::new(),
            actions: match space {
                ActionSpace::Discrete(_) => Actions::Discrete(Vec::new()),
                ActionSpace::Continuous(_) => Actions::Continuous(Vec::new()),
            },
            rewards: Vec::new(),
        }
    }

    /// Number of decision steps.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self, state_dim: usize, space: ActionSpace) -> Result<()> {
        let t = self.rewards.len();
        if self.actions.len() != t {
            return Err(Error::invalid(format!(
                "{} actions for {t} rewards",
                self.actions.len()
            )));
        }
        if self.observations.len() < t {
            return Err(Error::invalid(format!(
                "{} observations for {t} steps",
                self.observations.len()
            )));
        }
        if let Some(o) = self.observations.iter().find(|o| o.len() != state_dim) {
            return Err(Error::invalid(format!(
                "observation of width {} (expected {state_dim})",
                o.len()
            )));
        }
        match (&self.actions, space) {
            (Actions::Discrete(v), ActionSpace::Discrete(n)) => {
                if let Some(a) = v.iter().find(|&&a| a >= n) {
                    return Err(Error::invalid(format!("action {a} outside 0..{n}")));
                }
            }
            (Actions::Continuous(v), ActionSpace::Continuous(d)) => {
                if v.iter().any(|a| a.len() != d) {
                    return Err(Error::invalid(format!(
                        "continuous action width differs from {d}"
                    )));
                }
            }
            // an empty list parses as discrete
            (Actions::Discrete(v), ActionSpace::Continuous(_)) if v.is_empty() => {}
            _ => {
                return Err(Error::invalid(
                    "action kind does not match the action space".to_string(),
                ))
            }
        }
        Ok(())
    }
}

/// Suffix sums: `R̂ᵢ = Σ_{j≥i} rⱼ`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i];
        out[i] = acc;
    }
    out
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: EnvSpec,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub generator: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(Trajectory::total_return)
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let line = |v: serde_json::Result<String>| {
            v.map_err(|e| Error::Json {
                context: "dataset".into(),
                source: e,
            })
        };
        let io = |e| Error::io("dataset", e);
        writeln!(w, "{}", line(serde_json::to_string(&self.meta))?).map_err(io)?;
        for t in &self.trajectories {
            writeln!(w, "{}", line(serde_json::to_string(t))?).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        })
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::invalid("dataset is missing its metadata line"))?;
        let first = first.map_err(|e| Error::io("dataset", e))?;
        let meta: DatasetMeta = serde_json::from_str(&first).map_err(|e| Error::Json {
            context: "dataset metadata (line 1)".into(),
            source: e,
        })?;
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("dataset", e))?;
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Json {
                context: format!("dataset line {}", i + 1),
                source: e,
            })?;
            t.validate(meta.state_dim, meta.action_space)
                .map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
            trajectories.push(t);
        }
        Ok(Dataset { meta, trajectories })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert!(compute_rtg(&[]).is_empty());
        assert_eq!(compute_rtg(&[0.0; 4]), vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn rtg_recursion(r in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let g = compute_rtg(&r);
            let t = r.len() - 1;
            prop_assert_eq!(g[t], r[t]);
            for i in 0..t {
                prop_assert_eq!(g[i], r[i] + g[i + 1]);
            }
        }
    }

    fn sample() -> Dataset {
        let meta = DatasetMeta {
            env: EnvSpec::DenseChain { n: 3, horizon: 2 },
            state_dim: 3,
            action_space: ActionSpace::Discrete(2),
            generator: "optimal".into(),
            seed: 4,
        };
        let t = Trajectory {
            observations: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            actions: Actions::Discrete(vec![1, 1]),
            rewards: vec![0.1, 0.1],
        };
        Dataset {
            meta,
            trajectories: vec![t.clone(), t],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("{\"observations\""));
        let back = Dataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn continuous_actions_parse() {
        let t: Trajectory = serde_json::from_str(
            r#"{"observations":[[0.5],[0.4]],"actions":[[-1.0]],"rewards":[-0.25]}"#,
        )
        .unwrap();
        assert_eq!(t.actions, Actions::Continuous(vec![vec![-1.0]]));
        t.validate(1, ActionSpace::Continuous(1)).unwrap();
        assert!(t.validate(1, ActionSpace::Discrete(2)).is_err());
    }

    #[test]
    fn malformed_lines_are_reported() {
        let mut buf = Vec::new();
        sample().write_jsonl(&mut buf).unwrap();
        buf.extend_from_slice(b"{\"observations\":[],\"actions\":[0],\"rewards\":[]}\n");
        let err = Dataset::read_jsonl(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }
}
