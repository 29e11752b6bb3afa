//! Offline reinforcement learning: data, batching, loss, optimizer,
//! training, rollouts, scoring and toy environments.

pub mod batch;
pub mod data;
pub mod env;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod score;
pub mod train;

pub use batch::{make_batch, Batch, Sampler, StateNorm};
pub use data::{compute_rtg, Action, Actions, Dataset, DatasetMeta, Trajectory};
pub use env::{gen_dataset, random_baseline, Env, EnvSpec, Policy};
pub use eval::{rollout, Agent, Episode, History, ModelAgent, OracleAgent};
pub use loss::{action_loss, LossKind};
pub use optim::{AdamW, AdamWConfig, LrDecay, Schedule};
pub use score::normalized_score;
pub use train::{train, MetricRow, TrainConfig, TrainOutput};
