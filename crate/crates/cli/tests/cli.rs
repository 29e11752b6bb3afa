use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dmamba(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmamba"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        stdout(&o),
        stderr(&o)
    );
    o
}

const TINY: &str = r#"{
  "n_layers": 1,
  "embed_dim": 8,
  "ssm_state": 4,
  "context_length": 4,
  "max_timestep": 16,
  "batch_size": 8,
  "total_updates": 6,
  "warmup_steps": 2,
  "episodes": 30,
  "eval_episodes": 2,
  "log_every": 0
}"#;

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn score_examples_and_errors() {
    let d = TempDir::new().unwrap();
    let o = ok(dmamba(&["score", "1.6", "-20.7", "14.6"], d.path()));
    assert_eq!(stdout(&o).trim(), "63.2");
    let o = ok(dmamba(&["score", "5780.0", "163.9", "13455.0"], d.path()));
    assert_eq!(stdout(&o).trim(), "42.3");
    let o = ok(dmamba(&["score", "7", "7", "9"], d.path()));
    assert_eq!(stdout(&o).trim(), "0.0");
    assert_eq!(
        dmamba(&["score", "1", "2", "2"], d.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        dmamba(&["score", "1", "two", "2"], d.path()).status.code(),
        Some(2)
    );
    assert_eq!(dmamba(&["frobnicate"], d.path()).status.code(), Some(2));
}

#[test]
fn gen_data_counts_and_determinism() {
    let d = TempDir::new().unwrap();
    let run = |name: &str, episodes: &str| {
        ok(dmamba(
            &[
                "gen-data",
                "--env",
                "densechain",
                "--policy",
                "optimal",
                "--episodes",
                episodes,
                "--seed",
                "4",
                "--dataset",
                name,
            ],
            d.path(),
        ));
        fs::read(d.path().join(name)).unwrap()
    };
    let a = run("a.jsonl", "10");
    let b = run("b.jsonl", "10");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 11);
    let empty = run("e.jsonl", "0");
    let text = String::from_utf8(empty).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"generator\":\"optimal\""));

    let o = dmamba(&["gen-data", "--env", "atari"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env"));
    let o = dmamba(&["gen-data", "--policy", "greedy"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("policy"));
}

#[test]
fn config_errors_list_every_key() {
    let d = TempDir::new().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"embed_dm": 8, "learning_rat": 0.1}"#).unwrap();
    let o = dmamba(&["train", "--config", bad.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("embed_dm") && err.contains("learning_rat"),
        "{err}"
    );

    let o = dmamba(
        &[
            "train",
            "--set",
            "embed_dim=0",
            "--set",
            "grad_clip=-1",
            "--set",
            "beta2=1.5",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for k in ["embed_dim", "grad_clip", "beta2"] {
        assert!(err.contains(k), "{err}");
    }
}

#[test]
fn missing_dataset_names_the_path() {
    let d = TempDir::new().unwrap();
    let o = dmamba(
        &["train", "--dataset", "no/such/data.jsonl", "--out", "r"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/data.jsonl"), "{}", stderr(&o));
}

#[test]
fn train_artifacts_determinism_and_snapshot_round_trip() {
    let d = TempDir::new().unwrap();
    let cfg = tiny(d.path());
    ok(dmamba(
        &[
            "gen-data",
            "--config",
            &cfg,
            "--dataset",
            "data.jsonl",
            "--seed",
            "2",
        ],
        d.path(),
    ));
    for out in ["r1", "r2"] {
        ok(dmamba(
            &[
                "train",
                "--config",
                &cfg,
                "--dataset",
                "data.jsonl",
                "--seed",
                "5",
                "--out",
                out,
            ],
            d.path(),
        ));
    }
    let r1 = d.path().join("r1");
    for f in [
        "checkpoint.dmck",
        "metrics.csv",
        "config.json",
        "state_norm.json",
    ] {
        assert!(r1.join(f).exists(), "{f}");
    }
    let ckpt = fs::read(r1.join("checkpoint.dmck")).unwrap();
    assert_eq!(&ckpt[..4], b"DMCK");
    assert_eq!(ckpt, fs::read(d.path().join("r2/checkpoint.dmck")).unwrap());

    let metrics = fs::read_to_string(r1.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,loss,grad_norm,lr"));
    assert_eq!(lines.count(), 6);

    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r1.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 5);
    assert_eq!(snap["embed_dim"], 8);
    assert_eq!(snap["conv_kernel"], 4);
    assert!(snap["target_rtg"].is_null());

    let snapshot = r1.join("config.json");
    ok(dmamba(
        &[
            "train",
            "--config",
            snapshot.to_str().unwrap(),
            "--out",
            "r3",
        ],
        d.path(),
    ));
    assert_eq!(ckpt, fs::read(d.path().join("r3/checkpoint.dmck")).unwrap());
}

#[test]
fn rc_ablation_trains_without_channel_mlp() {
    let d = TempDir::new().unwrap();
    let cfg = tiny(d.path());
    ok(dmamba(
        &[
            "train",
            "--config",
            &cfg,
            "--set",
            "use_channel_mlp=false",
            "--out",
            "rc",
        ],
        d.path(),
    ));
    ok(dmamba(
        &["train", "--config", &cfg, "--out", "full"],
        d.path(),
    ));
    let rc = fs::read(d.path().join("rc/checkpoint.dmck")).unwrap();
    let full = fs::read(d.path().join("full/checkpoint.dmck")).unwrap();
    let has = |b: &[u8], s: &str| b.windows(s.len()).any(|w| w == s.as_bytes());
    assert!(!has(&rc, "mlp") && has(&full, "mlp"));
    assert!(rc.len() < full.len());
}

#[test]
fn eval_overrides_reproducibility_and_mismatch() {
    let d = TempDir::new().unwrap();
    let cfg = tiny(d.path());
    ok(dmamba(
        &["train", "--config", &cfg, "--out", "run"],
        d.path(),
    ));
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            "run/checkpoint.dmck",
            "--episodes",
            "1",
            "--seed",
            "3",
        ];
        args.extend_from_slice(extra);
        ok(dmamba(&args, d.path()))
    };
    let a = stdout(&eval(&["--target-rtg", "2.5"]));
    let csv_a = fs::read_to_string(d.path().join("run/eval.csv")).unwrap();
    let b = stdout(&eval(&["--target-rtg", "2.5"]));
    assert_eq!(a, b);
    assert_eq!(
        csv_a,
        fs::read_to_string(d.path().join("run/eval.csv")).unwrap()
    );
    assert!(a.starts_with("target_rtg 2.5000 "), "{a}");
    assert!(csv_a.starts_with("episode,return,normalized\n0,"));
    let default = stdout(&eval(&[]));
    assert!(default.starts_with("target_rtg 5.5000 "), "{default}");

    let o = eval(&["--random", "-20.7", "--expert", "14.6"]);
    let line = stdout(&o);
    let raw: f64 = line
        .split("return ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let printed = line
        .split("normalized ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap();
    let s = ok(dmamba(
        &["score", &raw.to_string(), "-20.7", "14.6"],
        d.path(),
    ));
    assert_eq!(stdout(&s).trim(), printed);

    let o = dmamba(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.dmck",
            "--set",
            "ssm_state=8",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("a_log"), "{}", stderr(&o));
}

#[test]
fn sweep_runs_each_value_and_matches_train() {
    let d = TempDir::new().unwrap();
    let cfg = tiny(d.path());
    ok(dmamba(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            "sw",
            "--key",
            "context_length",
            "2",
            "3",
        ],
        d.path(),
    ));
    let summary = fs::read_to_string(d.path().join("sw/sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "key,value,mean_return,std_return,normalized,final_loss"
    );
    assert!(lines[1].starts_with("context_length,2,") && lines[2].starts_with("context_length,3,"));
    assert!(d
        .path()
        .join("sw/context_length=3/checkpoint.dmck")
        .exists());

    ok(dmamba(
        &[
            "sweep", "--config", &cfg, "--out", "one", "--key", "seed", "0",
        ],
        d.path(),
    ));
    ok(dmamba(
        &[
            "train",
            "--config",
            &cfg,
            "--dataset",
            "one/dataset.jsonl",
            "--out",
            "direct",
        ],
        d.path(),
    ));
    assert_eq!(
        fs::read(d.path().join("one/seed=0/checkpoint.dmck")).unwrap(),
        fs::read(d.path().join("direct/checkpoint.dmck")).unwrap()
    );

    let o = dmamba(
        &["sweep", "--config", &cfg, "--key", "no_such_key", "1"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
