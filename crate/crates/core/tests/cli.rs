use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset_size": 400,
  "train": {
    "epochs": 2, "ensemble_size": 2, "model_hidden": [8],
    "pretrain": {"epochs": 2, "lr": 0.001, "batch_size": 64},
    "model_steps_per_epoch": 2, "model_batch": 32, "weight_hidden": [8], "k_mc": 2,
    "rollout_batch": 16, "rollout_horizon": 2, "buffer_capacity": 200,
    "policy_hidden": [8], "critic_hidden": [8], "batch_size": 32, "sac_updates": 2,
    "bc_epochs": 0, "eval_every": 1, "eval_episodes": 2, "q_rows": 32, "pred_err_starts": 8,
    "adversarial": {"lambda": 0.0003, "adv_rollout_batch": 16, "adv_horizon": 1}
  }
}"#;

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_romi-lab"))
        .args(args)
        .env("ROMI_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["verify", "--sandwich", "50", "--q-bound", "5"]);
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert_eq!(v["sandwich"]["violations"], 0);
}

#[test]
fn usage_and_config_errors_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = lab(dir.path(), &["train", "--xi", "-0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["exit_code"], 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 0}}"#).unwrap();
    let o = lab(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_twice_gives_identical_metrics_and_self_describing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut streams = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_romi-lab"))
            .args(["train", "--config", &cfg, "--algo", "romi", "--xi", "0.1", "--seed", "1"])
            .env("ROMI_LAB_OUT", &out)
            .output()
            .unwrap();
        let v = stdout_json(&o);
        let run_dir = Path::new(v["run_dir"].as_str().unwrap()).to_path_buf();
        assert!(run_dir.starts_with(&out));
        for f in ["config.json", "manifest.json", "metrics.jsonl", "timing.jsonl", "checkpoints/policy_meta.json"] {
            assert!(run_dir.join(f).exists(), "missing {f}");
        }
        let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["seed"], 1);
        assert_eq!(manifest["code_version"], env!("CARGO_PKG_VERSION"));
        let text = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let rec: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(rec["config_hash"], manifest["config_hash"]);
            assert_eq!(rec["seed"], 1);
        }
        streams.push((text, run_dir));
    }
    assert_eq!(streams[0].0, streams[1].0);

    let o = lab(dir.path(), &["eval", streams[0].1.to_str().unwrap(), "--episodes", "3"]);
    let est = stdout_json(&o);
    assert_eq!(est["episodes"], 3);
    assert!(est["mean"].as_f64().unwrap().is_finite());
}

#[test]
fn report_aggregates_and_refuses_mixed_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut runs = Vec::new();
    for seed in ["0", "1"] {
        let v = stdout_json(&lab(dir.path(), &["train", "--config", &cfg, "--algo", "mle-sac", "--seed", seed]));
        runs.push(v["run_dir"].as_str().unwrap().to_string());
    }
    let prefix = dir.path().join("agg");
    let mut args = vec!["report".to_string()];
    args.extend(runs.iter().cloned());
    args.extend(["--out".into(), prefix.to_str().unwrap().into()]);
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let v = stdout_json(&lab(dir.path(), &argv));
    assert!(v["rows"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert!(csv.starts_with("epoch,metric,mean,std,n\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",2")));
    assert!(Path::new(&runs[0]).join("metrics.csv").exists());

    let other = stdout_json(&lab(dir.path(), &["train", "--config", &cfg, "--algo", "rambo", "--seed", "0"]));
    let mut mixed = argv.clone();
    mixed.insert(1, other["run_dir"].as_str().unwrap());
    let o = lab(dir.path(), &mixed);
    assert_eq!(o.status.code(), Some(2));
    mixed.push("--force");
    assert!(lab(dir.path(), &mixed).status.success());
}

#[test]
fn gen_data_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&lab(dir.path(), &["gen-data", "--env", "chain", "--behavior", "random", "--size", "50", "--seed", "7"]));
    assert_eq!(v["transitions"], 50);
    assert!(Path::new(v["data"].as_str().unwrap()).exists());

    let cfg = tiny_config(dir.path());
    let o = lab(dir.path(), &["sweep", "--config", &cfg, "--param", "lambda", "--values", "0,0.1", "--epochs", "1"]);
    let v = stdout_json(&o);
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let root = Path::new(v["sweep_dir"].as_str().unwrap());
    assert!(root.join("sweep.json").exists());
    let summary = std::fs::read_to_string(root.join("sweep_summary.csv")).unwrap();
    assert!(summary.starts_with("lambda,seed,final_q,max_grad_norm,diverged\n"));
    assert_eq!(entries[0]["max_grad_norm"], 0.0);
}
