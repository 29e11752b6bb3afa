//! Run orchestration behind the command-line tool: a flat run
//! configuration with layered overrides, and the gen-data, train, eval,
//! sweep and score operations with their on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{init_params, DecisionMambaConfig, DecisionMambaParams};
use crate::rl::batch::StateNorm;
use crate::rl::data::Dataset;
use crate::rl::env::{gen_dataset, random_baseline, EnvSpec, Policy};
use crate::rl::eval::{mean_std, rollout, ModelAgent};
use crate::rl::optim::LrDecay;
use crate::rl::score::normalized_score;
use crate::rl::train::{self, MetricRow, TrainConfig, METRICS_HEADER};
use crate::rng::{stream, Stream};
use crate::scan::ScanMode;

pub const CHECKPOINT_FILE: &str = "checkpoint.dmck";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const NORM_FILE: &str = "state_norm.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SWEEP_FILE: &str = "sweep_summary.csv";
pub const EVAL_HEADER: &str = "episode,return,normalized";
pub const SWEEP_HEADER: &str = "key,value,mean_return,std_return,normalized,final_loss";

/// Episodes used to estimate the random-policy baseline when none is given.
pub const BASELINE_EPISODES: usize = 1000;

/// Every setting of every command, as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub env_n: usize,
    pub horizon: usize,
    pub policy: String,
    pub episodes: usize,
    pub dataset_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_path: Option<PathBuf>,

    pub n_layers: usize,
    pub embed_dim: usize,
    pub ssm_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub context_length: usize,
    pub dropout_p: f64,
    pub use_channel_mlp: bool,
    pub max_timestep: usize,
    pub scan_mode: ScanMode,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_updates: usize,
    pub grad_clip: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub rtg_scale: f64,
    pub log_every: usize,

    pub target_rtg: Option<f64>,
    pub eval_episodes: usize,
    pub temperature: Option<f64>,
    pub random_score: Option<f64>,
    pub expert_score: Option<f64>,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = t.model;
        RunConfig {
            env: "densechain".into(),
            env_n: 6,
            horizon: 10,
            policy: "epsilon(0.3)".into(),
            episodes: 1000,
            dataset_path: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_path: None,
            n_layers: m.n_layers,
            embed_dim: m.embed_dim,
            ssm_state: m.ssm_state,
            expand: m.expand,
            conv_kernel: m.conv_kernel,
            context_length: m.context_length,
            dropout_p: m.dropout_p,
            use_channel_mlp: m.use_channel_mlp,
            max_timestep: m.max_timestep,
            scan_mode: m.scan_mode,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            total_updates: t.total_updates,
            grad_clip: t.grad_clip,
            lr_decay: t.lr_decay,
            beta1: t.betas.0,
            beta2: t.betas.1,
            rtg_scale: t.rtg_scale,
            log_every: 100,
            target_rtg: None,
            eval_episodes: t.eval_episodes,
            temperature: None,
            random_score: None,
            expert_score: None,
            seed: 0,
        }
    }
}

/// One line of help per configuration key.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("env", "environment: densechain, delayedcatch or point1d"),
    ("env_n", "chain length (ignored by point1d)"),
    ("horizon", "episode horizon"),
    (
        "policy",
        "gen-data behaviour policy: optimal, random or epsilon(p)",
    ),
    ("episodes", "gen-data episode count"),
    (
        "dataset_path",
        "dataset JSONL; null generates one into out_dir",
    ),
    ("out_dir", "run directory for all artifacts"),
    (
        "checkpoint_path",
        "checkpoint to write (train) or read (eval); null is out_dir/checkpoint.dmck",
    ),
    ("n_layers", "Mamba layers"),
    ("embed_dim", "model width D"),
    ("ssm_state", "SSM state size N"),
    ("expand", "inner width factor E"),
    ("conv_kernel", "causal convolution width"),
    ("context_length", "context window K in timesteps"),
    ("dropout_p", "dropout probability"),
    (
        "use_channel_mlp",
        "false removes the channel-mixing layers (RC ablation)",
    ),
    ("max_timestep", "size of the timestep embedding table"),
    ("scan_mode", "sequential or parallel selective scan"),
    ("batch_size", "windows per update"),
    ("learning_rate", "base learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("warmup_steps", "linear warmup updates"),
    ("total_updates", "optimizer updates"),
    ("grad_clip", "global gradient-norm clip; 0 disables"),
    ("lr_decay", "linear_warmup or warmup_cosine"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("rtg_scale", "divisor applied to returns-to-go"),
    (
        "log_every",
        "progress line interval in updates; 0 is silent",
    ),
    (
        "target_rtg",
        "evaluation target return; null is the environment optimum",
    ),
    ("eval_episodes", "evaluation episodes"),
    (
        "temperature",
        "softmax sampling temperature; null is argmax",
    ),
    (
        "random_score",
        "random baseline for normalization; null estimates it",
    ),
    (
        "expert_score",
        "expert baseline for normalization; null is the environment optimum",
    ),
    ("seed", "run seed"),
];

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
    let context = context.into();
    move |source| Error::Json { context, source }
}

/// Parses a command-line value: JSON when it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        KEY_DOCS.iter().map(|(k, _)| *k).collect()
    }

    pub fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        }
    }

    /// Layers `layers` over `base`, later layers winning, after rejecting
    /// every unknown key at once.
    pub fn layered(base: Map<String, Value>, layers: &[Map<String, Value>]) -> Result<Self> {
        let known = Self::keys();
        let unknown: Vec<&str> = layers
            .iter()
            .flat_map(|m| m.keys())
            .filter(|k| !known.contains(&k.as_str()))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let mut merged = base;
        for layer in layers {
            merged.extend(layer.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("bad value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_map(path: &Path) -> Result<Map<String, Value>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match serde_json::from_str(&text).map_err(json_err(path.display().to_string()))? {
            Value::Object(m) => Ok(m),
            _ => Err(Error::Config(format!(
                "{}: expected a JSON object",
                path.display()
            ))),
        }
    }

    /// Defaults, then the optional file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Map<String, Value>) -> Result<Self> {
        let file = file.map(Self::read_map).transpose()?.unwrap_or_default();
        Self::layered(Self::default().to_map(), &[file, overrides.clone()])
    }

    /// Checks every value and lists every offending key.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<&str> = Vec::new();
        if self.env_spec().is_err() {
            bad.extend(
                ["env", "env_n", "horizon"]
                    .iter()
                    .filter(|k| self.env_key_is_bad(k)),
            );
        }
        if self.policy.parse::<Policy>().is_err() {
            bad.push("policy");
        }
        let positive = [
            ("n_layers", self.n_layers),
            ("embed_dim", self.embed_dim),
            ("ssm_state", self.ssm_state),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("context_length", self.context_length),
            ("max_timestep", self.max_timestep),
            ("batch_size", self.batch_size),
        ];
        bad.extend(positive.iter().filter(|(_, v)| *v == 0).map(|(k, _)| *k));
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push("dropout_p");
        }
        let pos_finite = |x: f64| x.is_finite() && x > 0.0;
        let nonneg_finite = |x: f64| x.is_finite() && x >= 0.0;
        if !pos_finite(self.learning_rate) {
            bad.push("learning_rate");
        }
        if !nonneg_finite(self.weight_decay) {
            bad.push("weight_decay");
        }
        if !nonneg_finite(self.grad_clip) {
            bad.push("grad_clip");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta2");
        }
        if !pos_finite(self.rtg_scale) {
            bad.push("rtg_scale");
        }
        if self.target_rtg.is_some_and(|r| !r.is_finite()) {
            bad.push("target_rtg");
        }
        if self.temperature.is_some_and(|t| !pos_finite(t)) {
            bad.push("temperature");
        }
        if self.random_score.is_some_and(|r| !r.is_finite()) {
            bad.push("random_score");
        }
        if self.expert_score.is_some_and(|r| !r.is_finite()) {
            bad.push("expert_score");
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

    fn env_key_is_bad(&self, key: &str) -> bool {
        if !EnvSpec::NAMES.contains(&self.env.as_str()) {
            return key == "env";
        }
        match key {
            "env_n" => {
                self.env != "point1d"
                    && EnvSpec::from_name(&self.env, self.env_n, self.horizon.max(1)).is_err()
            }
            "horizon" => EnvSpec::from_name(&self.env, self.env_n.max(2), self.horizon).is_err(),
            _ => false,
        }
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::from_name(&self.env, self.env_n, self.horizon)
    }

    pub fn policy(&self) -> Result<Policy> {
        self.policy.parse()
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join(DATASET_FILE))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join(CHECKPOINT_FILE))
    }

    /// Training configuration for data with the given state and action layout.
    pub fn train_config(&self, spec: &EnvSpec) -> TrainConfig {
        TrainConfig {
            model: DecisionMambaConfig {
                n_layers: self.n_layers,
                embed_dim: self.embed_dim,
                ssm_state: self.ssm_state,
                expand: self.expand,
                conv_kernel: self.conv_kernel,
                context_length: self.context_length,
                dropout_p: self.dropout_p,
                use_channel_mlp: self.use_channel_mlp,
                max_timestep: self.max_timestep,
                action_space: spec.action_space(),
                state_dim: spec.state_dim(),
                scan_mode: self.scan_mode,
            },
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_updates: self.total_updates,
            grad_clip: self.grad_clip,
            lr_decay: self.lr_decay,
            betas: (self.beta1, self.beta2),
            target_rtg: self.target_rtg,
            eval_episodes: self.eval_episodes,
            rtg_scale: self.rtg_scale,
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err("config"))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSummary {
    pub path: PathBuf,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Generates a dataset with the configured environment and policy.
pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    let spec = cfg.env_spec()?;
    let ds = gen_dataset(
        &spec,
        cfg.policy()?,
        cfg.episodes,
        cfg.seed,
        &mut stream(cfg.seed, Stream::Generate),
    )?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(&path)?;
    let (mean_return, std_return) = mean_std(&ds.returns());
    Ok(DataSummary {
        path,
        episodes: ds.trajectories.len(),
        mean_return,
        std_return,
    })
}

/// Loads the configured dataset, generating it first when no path is set.
pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => Dataset::load(p),
        None => {
            let path = gen_data(cfg)?.path;
            Dataset::load(&path)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: DecisionMambaParams,
    pub model: DecisionMambaConfig,
    pub norm: StateNorm,
    pub metrics: Vec<MetricRow>,
    pub checkpoint: PathBuf,
}

/// Trains and writes the checkpoint, metrics CSV, state normalization and
/// resolved-config snapshot into `out_dir`.
pub fn train(cfg: &RunConfig, mut on_step: impl FnMut(&MetricRow)) -> Result<TrainRun> {
    create_dir(&cfg.out_dir)?;
    let ds = dataset(cfg)?;
    let tc = cfg.train_config(&ds.meta.env);
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut metrics = create(&metrics_path)?;
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
    let mut write_err = None;
    let out = train::train(&tc, &ds, |row| {
        if write_err.is_none() {
            write_err = writeln!(metrics, "{}", row.csv()).err();
        }
        on_step(row);
    })?;
    if let Some(e) = write_err {
        return Err(io(e));
    }
    metrics.flush().map_err(io)?;
    let norm_path = cfg.out_dir.join(NORM_FILE);
    let norm_text = serde_json::to_string(&out.norm).map_err(json_err("state normalization"))?;
    fs::write(&norm_path, norm_text + "\n").map_err(|e| Error::io(&norm_path, e))?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(&out.params, &ckpt)?;
    Ok(TrainRun {
        params: out.params,
        model: tc.model,
        norm: out.norm,
        metrics: out.metrics,
        checkpoint: ckpt,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub target_rtg: f64,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub random_score: f64,
    pub expert_score: f64,
    pub normalized: f64,
}

impl EvalSummary {
    pub fn line(&self) -> String {
        format!(
            "target_rtg {:.4} episodes {} return {:.4} ± {:.4} normalized {:.1} (random {:.4}, expert {:.4})",
            self.target_rtg,
            self.returns.len(),
            self.mean_return,
            self.std_return,
            self.normalized,
            self.random_score,
            self.expert_score
        )
    }
}

/// Baselines used to normalize returns on `spec`.
pub fn baselines(cfg: &RunConfig, spec: &EnvSpec) -> Result<(f64, f64)> {
    let random = match cfg.random_score {
        Some(r) => r,
        None => {
            random_baseline(
                spec,
                BASELINE_EPISODES,
                &mut stream(cfg.seed, Stream::Baseline),
            )?
            .0
        }
    };
    let expert = match cfg.expert_score {
        Some(e) => e,
        None => spec.optimal_return()?,
    };
    Ok((random, expert))
}

/// Rolls out trained parameters and writes the eval CSV into `out_dir`.
pub fn evaluate(
    cfg: &RunConfig,
    params: &DecisionMambaParams,
    model: &DecisionMambaConfig,
    norm: &StateNorm,
) -> Result<EvalSummary> {
    let spec = cfg.env_spec()?;
    if spec.state_dim() != model.state_dim || spec.action_space() != model.action_space {
        return Err(Error::Config(format!(
            "environment {spec} does not match the model's state_dim {} / action_space {:?}",
            model.state_dim, model.action_space
        )));
    }
    let target_rtg = match cfg.target_rtg {
        Some(t) => t,
        None => spec.optimal_return()?,
    };
    let mut agent = ModelAgent {
        params,
        config: model,
        norm,
        rtg_scale: cfg.rtg_scale,
        temperature: cfg.temperature,
    };
    let episodes = rollout(
        &spec,
        &mut agent,
        target_rtg,
        cfg.eval_episodes,
        &mut stream(cfg.seed, Stream::Eval),
    )?;
    let returns: Vec<f64> = episodes.iter().map(|e| e.total_return).collect();
    let (random_score, expert_score) = baselines(cfg, &spec)?;
    let path = cfg.out_dir.join(EVAL_FILE);
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "{EVAL_HEADER}").map_err(io)?;
    for (i, r) in returns.iter().enumerate() {
        writeln!(
            w,
            "{i},{r},{}",
            normalized_score(*r, random_score, expert_score)?
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    let (mean_return, std_return) = mean_std(&returns);
    Ok(EvalSummary {
        target_rtg,
        normalized: normalized_score(mean_return, random_score, expert_score)?,
        returns,
        mean_return,
        std_return,
        random_score,
        expert_score,
    })
}

/// The config snapshot stored next to a checkpoint.
pub fn snapshot_for(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(CONFIG_FILE)
}

/// Evaluates a saved run. The snapshot beside the checkpoint supplies the
/// base settings; `file` and `overrides` are layered on top.
pub fn eval(
    checkpoint_path: &Path,
    file: Option<&Path>,
    overrides: &Map<String, Value>,
) -> Result<EvalSummary> {
    let snapshot = snapshot_for(checkpoint_path);
    let mut base = RunConfig::default().to_map();
    base.extend(RunConfig::read_map(&snapshot)?);
    let file = file
        .map(RunConfig::read_map)
        .transpose()?
        .unwrap_or_default();
    let cfg = RunConfig::layered(base, &[file, overrides.clone()])?;
    let model = cfg.train_config(&cfg.env_spec()?).model;
    let mut params = init_params(&model, &mut stream(cfg.seed, Stream::Init))?;
    checkpoint::load(&mut params, checkpoint_path)?;
    let norm_path = checkpoint_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(NORM_FILE);
    let norm = match fs::read_to_string(&norm_path) {
        Ok(text) => {
            serde_json::from_str(&text).map_err(json_err(norm_path.display().to_string()))?
        }
        Err(_) => StateNorm::identity(model.state_dim),
    };
    evaluate(&cfg, &params, &model, &norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: Value,
    pub out_dir: PathBuf,
    pub eval: EvalSummary,
    pub final_loss: f64,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Trains and evaluates once per value of `key`, each in its own
/// subdirectory of `out_dir`, and writes the summary CSV. Without a
/// dataset path, one dataset is generated into `out_dir` and shared.
pub fn sweep(
    base: &RunConfig,
    key: &str,
    values: &[Value],
    mut on_step: impl FnMut(&Value, &MetricRow),
) -> Result<Vec<SweepRow>> {
    let known = RunConfig::keys();
    if !known.contains(&key) || matches!(key, "out_dir" | "checkpoint_path") {
        return Err(Error::Config(format!("cannot sweep over key '{key}'")));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    create_dir(&base.out_dir)?;
    let mut base = base.clone();
    if base.dataset_path.is_none() {
        base.dataset_path = Some(gen_data(&base)?.path);
    }
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let label = value_label(v);
        let mut layer = Map::new();
        layer.insert(key.to_string(), v.clone());
        layer.insert(
            "out_dir".into(),
            Value::String(
                base.out_dir
                    .join(format!("{key}={label}"))
                    .display()
                    .to_string(),
            ),
        );
        let cfg = RunConfig::layered(base.to_map(), &[layer])?;
        let run = train(&cfg, |row| on_step(v, row))?;
        let eval = evaluate(&cfg, &run.params, &run.model, &run.norm)?;
        rows.push(SweepRow {
            value: v.clone(),
            out_dir: cfg.out_dir.clone(),
            eval,
            final_loss: run.metrics.last().map_or(f64::NAN, |m| m.loss),
        });
    }
    let path = base.out_dir.join(SWEEP_FILE);
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "{SWEEP_HEADER}").map_err(io)?;
    for r in &rows {
        writeln!(
            w,
            "{key},{},{},{},{},{}",
            value_label(&r.value),
            r.eval.mean_return,
            r.eval.std_return,
            r.eval.normalized,
            r.final_loss
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// The normalized score rounded to one decimal.
pub fn score(raw: f64, random: f64, expert: f64) -> Result<String> {
    if ![raw, random, expert].iter().all(|x| x.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    normalized_score(raw, random, expert)
        .map(|s| format!("{s:.1}"))
        .map_err(|e| Error::Config(e.to_string()))
}

/// Exit status for an error: 2 for usage and configuration problems, 1 for
/// everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn key_docs_cover_every_field() {
        let mut fields: Vec<String> = RunConfig::default().to_map().keys().cloned().collect();
        let mut docs: Vec<String> = RunConfig::keys().iter().map(|k| k.to_string()).collect();
        fields.sort();
        docs.sort();
        assert_eq!(fields, docs);
    }

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seed": 3, "embed_dim": 32}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&file), &overrides(&[("seed", Value::from(9))])).unwrap();
        assert_eq!((cfg.seed, cfg.embed_dim, cfg.n_layers), (9, 32, 2));

        fs::write(&file, r#"{"sead": 3, "embed_dm": 32}"#).unwrap();
        let err = RunConfig::resolve(Some(&file), &Map::new()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let msg = err.to_string();
        assert!(msg.contains("sead") && msg.contains("embed_dm"), "{msg}");
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let o = overrides(&[
            ("embed_dim", Value::from(0)),
            ("learning_rate", Value::from(-1.0)),
            ("policy", Value::from("greedy")),
            ("env", Value::from("atari")),
        ]);
        let msg = RunConfig::resolve(None, &o).unwrap_err().to_string();
        for k in ["embed_dim", "learning_rate", "policy", "env"] {
            assert!(msg.contains(k), "{msg}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            RunConfig::resolve(None, &overrides(&[("target_rtg", Value::from(2.5))])).unwrap();
        let path = dir.path().join(CONFIG_FILE);
        cfg.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"temperature\": null"));
        assert_eq!(RunConfig::resolve(Some(&path), &Map::new()).unwrap(), cfg);
    }

    #[test]
    fn values_parse_as_json_or_string() {
        assert_eq!(parse_value("3"), Value::from(3));
        assert_eq!(parse_value("false"), Value::from(false));
        assert_eq!(parse_value("epsilon(0.3)"), Value::from("epsilon(0.3)"));
        assert_eq!(parse_value("null"), Value::Null);
    }

    #[test]
    fn score_formatting() {
        assert_eq!(score(1.6, -20.7, 14.6).unwrap(), "63.2");
        assert_eq!(score(5780.0, 163.9, 13455.0).unwrap(), "42.3");
        assert_eq!(score(3.0, 3.0, 10.0).unwrap(), "0.0");
        assert_eq!(exit_code(&score(1.0, 2.0, 2.0).unwrap_err()), 2);
    }
}
