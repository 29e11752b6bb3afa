//! K-step training windows.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::data::{compute_rtg, Dataset, Trajectory};
use crate::tensor::Tensor;

/// A padded batch of windows. `actions` is `[B, K, A]` for continuous
/// actions and `[B, K, 1]` holding class indices for discrete ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rtg: Tensor,
    pub states: Tensor,
    pub actions: Tensor,
    /// Row-major `[B, K]`.
    pub timesteps: Vec<usize>,
    pub mask: Tensor,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.rtg.shape()[0]
    }

    pub fn context(&self) -> usize {
        self.rtg.shape()[1]
    }
}

/// Per-dimension state standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNorm {
    pub fn identity(dim: usize) -> Self {
        StateNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over every observation.
    pub fn fit(dataset: &Dataset) -> Self {
        let dim = dataset.meta.state_dim;
        let obs = dataset.trajectories.iter().flat_map(|t| &t.observations);
        let mut count = 0.0;
        let mut mean = vec![0.0; dim];
        for o in obs.clone() {
            count += 1.0;
            mean.iter_mut().zip(o).for_each(|(m, v)| *m += v);
        }
        if count == 0.0 {
            return Self::identity(dim);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for o in obs {
            var.iter_mut()
                .zip(o)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        let std = var.iter().map(|s| (s / count).sqrt() + 1e-6).collect();
        StateNorm { mean, std }
    }

    pub fn apply(&self, state: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (state[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Draws windows from a dataset: trajectories with probability
/// proportional to their length, then a uniform window start. Windows are
/// `K` steps long when the trajectory allows, otherwise the whole
/// trajectory left-padded with zeros.
pub struct Sampler<'d> {
    dataset: &'d Dataset,
    rtgs: Vec<Vec<f64>>,
    cumulative: Vec<usize>,
    pub norm: StateNorm,
    pub rtg_scale: f64,
}

impl<'d> Sampler<'d> {
    pub fn new(dataset: &'d Dataset, norm: StateNorm, rtg_scale: f64) -> Result<Self> {
        let total = dataset.total_steps();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        if !(rtg_scale.is_finite() && rtg_scale > 0.0) {
            return Err(Error::invalid(format!(
                "rtg scale must be positive, got {rtg_scale}"
            )));
        }
        let mut acc = 0;
        let cumulative = dataset
            .trajectories
            .iter()
            .map(|t| {
                acc += t.len();
                acc
            })
            .collect();
        Ok(Sampler {
            dataset,
            rtgs: dataset
                .trajectories
                .iter()
                .map(|t| compute_rtg(&t.rewards))
                .collect(),
            cumulative,
            norm,
            rtg_scale,
        })
    }

    pub fn sample_trajectory(&self, rng: &mut dyn RngCore) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let step = rng.random_range(0..total);
        self.cumulative.partition_point(|&c| c <= step)
    }

    pub fn sample(&self, k: usize, batch_size: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        if k == 0 || batch_size == 0 {
            return Err(Error::invalid(
                "context length and batch size must be positive",
            ));
        }
        let s = self.dataset.meta.state_dim;
        let a = action_width(self.dataset);
        let mut out = BatchBuilder::new(batch_size, k, s, a);
        for row in 0..batch_size {
            let ti = self.sample_trajectory(rng);
            let t = &self.dataset.trajectories[ti];
            let start = if t.len() > k {
                rng.random_range(0..=t.len() - k)
            } else {
                0
            };
            out.fill(
                row,
                t,
                &self.rtgs[ti],
                start,
                (start + k).min(t.len()),
                &self.norm,
                self.rtg_scale,
            );
        }
        Ok(out.finish())
    }
}

fn action_width(d: &Dataset) -> usize {
    d.meta.action_space.input_dim()
}

struct BatchBuilder {
    k: usize,
    s: usize,
    a: usize,
    rtg: Vec<f64>,
    states: Vec<f64>,
    actions: Vec<f64>,
    timesteps: Vec<usize>,
    mask: Vec<f64>,
    shape: (usize, usize),
}

impl BatchBuilder {
    fn new(b: usize, k: usize, s: usize, a: usize) -> Self {
        BatchBuilder {
            k,
            s,
            a,
            rtg: vec![0.0; b * k],
            states: vec![0.0; b * k * s],
            actions: vec![0.0; b * k * a],
            timesteps: vec![0; b * k],
            mask: vec![0.0; b * k],
            shape: (b, k),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fill(
        &mut self,
        row: usize,
        t: &Trajectory,
        rtg: &[f64],
        start: usize,
        end: usize,
        norm: &StateNorm,
        scale: f64,
    ) {
        let (k, s, a) = (self.k, self.s, self.a);
        let pad = k - (end - start);
        for (j, step) in (start..end).enumerate() {
            let slot = row * k + pad + j;
            self.rtg[slot] = rtg[step] / scale;
            norm.apply(
                &t.observations[step],
                &mut self.states[slot * s..(slot + 1) * s],
            );
            self.actions[slot * a..(slot + 1) * a].copy_from_slice(&t.actions.get(step).encode());
            self.timesteps[slot] = step;
            self.mask[slot] = 1.0;
        }
    }

    fn finish(self) -> Batch {
        let (b, k) = self.shape;
        Batch {
            rtg: Tensor::from_parts(vec![b, k, 1], self.rtg),
            states: Tensor::from_parts(vec![b, k, self.s], self.states),
            actions: Tensor::from_parts(vec![b, k, self.a], self.actions),
            timesteps: self.timesteps,
            mask: Tensor::from_parts(vec![b, k], self.mask),
        }
    }
}

/// One batch with the dataset's own standardization (continuous states
/// only) and no return scaling.
pub fn make_batch(
    dataset: &Dataset,
    k: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Batch> {
    let norm = if dataset.meta.env.continuous_states() {
        StateNorm::fit(dataset)
    } else {
        StateNorm::identity(dataset.meta.state_dim)
    };
    Sampler::new(dataset, norm, 1.0)?.sample(k, batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionSpace;
    use crate::rl::data::{Actions, DatasetMeta};
    use crate::rl::env::EnvSpec;
    use crate::rng::{stream, Stream};

    fn traj(len: usize, tag: f64) -> Trajectory {
        Trajectory {
            observations: (0..=len).map(|i| vec![tag, i as f64]).collect(),
            actions: Actions::Continuous((0..len).map(|i| vec![0.1 * i as f64]).collect()),
            rewards: (0..len).map(|i| i as f64 + 1.0).collect(),
        }
    }

    fn dataset(ts: Vec<Trajectory>) -> Dataset {
        Dataset {
            meta: DatasetMeta {
                env: EnvSpec::Point1d { horizon: 100 },
                state_dim: 2,
                action_space: ActionSpace::Continuous(1),
                generator: "test".into(),
                seed: 0,
            },
            trajectories: ts,
        }
    }

    #[test]
    fn short_trajectory_is_left_padded() {
        let d = dataset(vec![traj(3, 1.0)]);
        let s = Sampler::new(&d, StateNorm::identity(2), 1.0).unwrap();
        let b = s.sample(5, 2, &mut stream(1, Stream::Data)).unwrap();
        for row in 0..2 {
            assert_eq!(
                &b.mask.data()[row * 5..row * 5 + 5],
                &[0.0, 0.0, 1.0, 1.0, 1.0]
            );
            assert_eq!(&b.timesteps[row * 5..row * 5 + 5], &[0, 0, 0, 1, 2]);
            assert_eq!(
                &b.rtg.data()[row * 5..row * 5 + 5],
                &[0.0, 0.0, 6.0, 5.0, 3.0]
            );
            assert!(b.states.data()[row * 10..row * 10 + 4]
                .iter()
                .all(|&v| v == 0.0));
            assert_eq!(b.actions.data()[row * 5 + 4], 0.2);
        }
    }

    #[test]
    fn long_trajectory_fills_window() {
        let d = dataset(vec![traj(12, 1.0)]);
        let s = Sampler::new(&d, StateNorm::identity(2), 2.0).unwrap();
        let b = s.sample(5, 50, &mut stream(2, Stream::Data)).unwrap();
        assert!(b.mask.data().iter().all(|&m| m == 1.0));
        for row in 0..50 {
            let ts = &b.timesteps[row * 5..row * 5 + 5];
            assert!(ts.windows(2).all(|w| w[1] == w[0] + 1));
            let full = compute_rtg(&d.trajectories[0].rewards);
            assert_eq!(b.rtg.data()[row * 5], full[ts[0]] / 2.0);
            assert_eq!(b.states.data()[row * 10 + 1], ts[0] as f64);
        }
    }

    #[test]
    fn sampling_is_length_weighted() {
        let d = dataset(vec![traj(2, 0.0), traj(18, 1.0)]);
        let s = Sampler::new(&d, StateNorm::identity(2), 1.0).unwrap();
        let mut rng = stream(3, Stream::Data);
        let mut counts = [0usize; 2];
        for _ in 0..100_000 {
            counts[s.sample_trajectory(&mut rng)] += 1;
        }
        let ratio = counts[1] as f64 / counts[0] as f64;
        assert!((ratio / 9.0 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn empty_dataset_fails() {
        let d = dataset(vec![]);
        assert!(matches!(
            make_batch(&d, 4, 2, &mut stream(0, Stream::Data)),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn standardization_statistics() {
        let d = dataset(vec![traj(40, 3.0), traj(20, -1.0)]);
        let n = StateNorm::fit(&d);
        let mut z = vec![0.0; 2];
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut count = 0.0;
        for o in d.trajectories.iter().flat_map(|t| &t.observations) {
            n.apply(o, &mut z);
            for i in 0..2 {
                sums[i] += z[i];
                sq[i] += z[i] * z[i];
            }
            count += 1.0;
        }
        for i in 0..2 {
            assert!((sums[i] / count).abs() < 1e-9);
            assert!((sq[i] / count - 1.0).abs() < 1e-4);
        }
    }
}
