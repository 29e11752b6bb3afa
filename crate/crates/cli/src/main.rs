use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dmamba::rl::train::MetricRow;
use dmamba::run::{self, RunConfig, KEY_DOCS};
use dmamba::Error;
use serde_json::{Map, Value};

/// Decision Mamba: offline return-conditioned RL with a selective
/// state-space sequence model.
#[derive(Parser, Debug)]
#[command(name = "dmamba", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration (flat keys, see below)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. --set embed_dim=32
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an offline dataset from a behaviour policy
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        /// optimal, random or epsilon(p)
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Dataset file to write (default: <out>/dataset.jsonl)
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, metrics, state normalization and
    /// the resolved config into the output directory
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default: generate one from the env settings)
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll out a checkpoint; reads the config snapshot stored beside it
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        target_rtg: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Random-policy baseline for normalization
        #[arg(long, allow_hyphen_values = true)]
        random: Option<f64>,
        /// Expert baseline for normalization
        #[arg(long, allow_hyphen_values = true)]
        expert: Option<f64>,
    },
    /// Print 100·(raw − random)/(expert − random) to one decimal
    Score {
        #[arg(allow_hyphen_values = true)]
        raw: f64,
        #[arg(allow_hyphen_values = true)]
        random: f64,
        #[arg(allow_hyphen_values = true)]
        expert: f64,
    },
    /// Train and evaluate once per value of a configuration key
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        key: String,
        #[arg(required = true, num_args = 1.., allow_hyphen_values = true)]
        values: Vec<String>,
    },
}

fn keys_help() -> String {
    let defaults = RunConfig::default().to_map();
    let mut s = String::from("Configuration keys (defaults in brackets):\n");
    for (k, doc) in KEY_DOCS {
        s.push_str(&format!("  {k:<16} {doc} [{}]\n", defaults[*k]));
    }
    s.push_str("\nPrecedence: command-line flags, then --config file, then defaults.\nExit codes: 0 success, 1 runtime failure, 2 usage or configuration error.");
    s
}

fn overrides(
    common: &Common,
    extra: &[(&str, Option<Value>)],
) -> Result<Map<String, Value>, Error> {
    let mut m = Map::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        m.insert(k.trim().to_string(), run::parse_value(v.trim()));
    }
    if let Some(seed) = common.seed {
        m.insert("seed".into(), Value::from(seed));
    }
    if let Some(out) = &common.out {
        m.insert("out_dir".into(), Value::from(out.display().to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            m.insert(k.to_string(), v.clone());
        }
    }
    Ok(m)
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::from(p.display().to_string()))
}

fn progress(cfg: &RunConfig, prefix: &str, row: &MetricRow) {
    if cfg.log_every > 0
        && (row.step.is_multiple_of(cfg.log_every) || row.step == cfg.total_updates)
    {
        eprintln!(
            "{prefix}update {}/{} loss {:.5} grad_norm {:.4} lr {:.3e}",
            row.step, cfg.total_updates, row.loss, row.grad_norm, row.lr
        );
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            common,
            env,
            policy,
            episodes,
            dataset,
        } => {
            let o = overrides(
                &common,
                &[
                    ("env", env.map(Value::from)),
                    ("policy", policy.map(Value::from)),
                    ("episodes", episodes.map(Value::from)),
                    ("dataset_path", path_value(&dataset)),
                ],
            )?;
            let cfg = RunConfig::resolve(common.config.as_deref(), &o)?;
            let s = run::gen_data(&cfg)?;
            println!(
                "wrote {} episodes to {}; return {:.4} ± {:.4}",
                s.episodes,
                s.path.display(),
                s.mean_return,
                s.std_return
            );
        }
        Command::Train { common, dataset } => {
            let o = overrides(&common, &[("dataset_path", path_value(&dataset))])?;
            let cfg = RunConfig::resolve(common.config.as_deref(), &o)?;
            let r = run::train(&cfg, |row| progress(&cfg, "", row))?;
            println!(
                "final loss {:.5}; checkpoint {}; artifacts in {}",
                r.metrics.last().map_or(f64::NAN, |m| m.loss),
                r.checkpoint.display(),
                cfg.out_dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            env,
            target_rtg,
            episodes,
            random,
            expert,
        } => {
            let o = overrides(
                &common,
                &[
                    ("env", env.map(Value::from)),
                    ("target_rtg", target_rtg.map(Value::from)),
                    ("eval_episodes", episodes.map(Value::from)),
                    ("random_score", random.map(Value::from)),
                    ("expert_score", expert.map(Value::from)),
                ],
            )?;
            let s = run::eval(&checkpoint, common.config.as_deref(), &o)?;
            println!("{}", s.line());
        }
        Command::Score {
            raw,
            random,
            expert,
        } => {
            println!("{}", run::score(raw, random, expert)?);
        }
        Command::Sweep {
            common,
            key,
            values,
        } => {
            let o = overrides(&common, &[])?;
            let cfg = RunConfig::resolve(common.config.as_deref(), &o)?;
            let values: Vec<Value> = values.iter().map(|v| run::parse_value(v)).collect();
            let rows = run::sweep(&cfg, &key, &values, |v, row| {
                progress(&cfg, &format!("[{key}={v}] "), row)
            })?;
            for r in &rows {
                println!("{key}={}: {}", r.value, r.eval.line());
            }
            println!("summary {}", cfg.out_dir.join(run::SWEEP_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = keys_help();
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|c| c.after_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
