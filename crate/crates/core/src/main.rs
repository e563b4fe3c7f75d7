use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use romi_core::dynamics::GaussianDynamicsEnsemble;
use romi_core::error::{LabError, Result};
use romi_core::harness::{evaluate_run, out_root, report, run_sweep, run_training, ExperimentConfig, SweepParam};
use romi_core::mdp::{generate_dataset, BehaviorPolicy, ContinuousEnv, Environment, TabularMDP};
use romi_core::oracle::verify_all;
use romi_core::sac::{pretrain_ensemble, Algo, ModelUpdate};

#[derive(Parser)]
#[command(name = "romi-lab", version, about = "Robust value-aware model learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    PointMass,
    LinearGaussian,
    Chain,
    Gridworld,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Roll a behaviour policy and write an offline dataset.
    GenData {
        #[arg(long, value_enum, default_value = "point-mass")]
        env: EnvName,
        #[arg(long, default_value = "medium")]
        behavior: String,
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the dynamics ensemble by maximum likelihood and save it.
    PretrainModel {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one seed of romi, rambo or mle-sac.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long, allow_negative_numbers = true)]
        xi: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `off` replaces the bilevel model update with plain maximum likelihood.
        #[arg(long, value_enum)]
        bilevel: Option<Toggle>,
        /// Explicit model update: bilevel, mle, adversarial or rvl-only.
        #[arg(long, value_parser = parse_model_update)]
        model_update: Option<ModelUpdate>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory written by `pretrain-model`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate the saved policy of a run directory.
    Eval {
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train over a grid of xi or lambda values.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite and print a JSON report.
    Verify {
        #[arg(long, default_value_t = 500)]
        sandwich: usize,
        #[arg(long, default_value_t = 50)]
        q_bound: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate metric streams into CSV and JSON.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate even when config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

fn parse_model_update(s: &str) -> std::result::Result<ModelUpdate, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown model update {s:?}"))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            env,
            behavior,
            size,
            seed,
            name,
            out,
        } => {
            let env = match env {
                EnvName::PointMass => Environment::Continuous(ContinuousEnv::point_mass()),
                EnvName::LinearGaussian => Environment::Continuous(ContinuousEnv::linear_gaussian()),
                EnvName::Chain => Environment::Tabular(TabularMDP::chain(5, 0.1, 0.9)?),
                EnvName::Gridworld => Environment::Tabular(TabularMDP::gridworld(4, 4, 0.1, 0.9)?),
            };
            let policy = BehaviorPolicy::preset(&behavior).map_err(|e| LabError::Config(e.to_string()))?;
            let ds = generate_dataset(&env, &policy, size, seed)?;
            let name = name.unwrap_or_else(|| format!("{}-{behavior}-{seed}", env.id()));
            let dir = out_root(out.as_deref()).join("datasets");
            let (meta, data) = ds.write(&dir, &name)?;
            print_json(&json!({"meta": meta, "data": data, "transitions": ds.len()}))
        }
        Command::PretrainModel {
            config,
            dataset,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let ds = romi_core::harness::obtain_dataset(&cfg, seed)?;
            let ens = pretrain_ensemble(&cfg.train, &ds, seed)?;
            let dir = out_root(out.as_deref()).join("models").join(format!("{}-seed-{seed}", cfg.hash()));
            ens.save(&dir)?;
            print_json(&json!({"model_dir": dir, "members": ens.members.len()}))
        }
        Command::Train {
            config,
            algo,
            xi,
            lambda,
            seed,
            epochs,
            bilevel,
            model_update,
            dataset,
            pretrained,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(a) = algo {
                cfg.train.algo = a;
                cfg.train.model_update = None;
            }
            if let Some(x) = xi {
                cfg.train.rvl.xi = x;
            }
            if let Some(l) = lambda {
                cfg.train.adversarial.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            match bilevel {
                Some(Toggle::Off) if cfg.train.algo == Algo::Romi => cfg.train.model_update = Some(ModelUpdate::Mle),
                Some(Toggle::Off) => return Err(LabError::Config("--bilevel applies only to --algo romi".into())),
                Some(Toggle::On) | None => {}
            }
            if model_update.is_some() {
                cfg.train.model_update = model_update;
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let seed = seed.unwrap_or(cfg.seeds[0]);
            cfg.seeds = vec![seed];
            cfg.validate()?;
            let ens = pretrained.as_deref().map(GaussianDynamicsEnsemble::load).transpose()?;
            let algo_name = serde_json::to_value(cfg.train.algo)?;
            let dir = out_root(out.as_deref())
                .join("train")
                .join(format!("{}-{}", algo_name.as_str().unwrap_or("run"), cfg.hash()))
                .join(format!("seed-{seed}"));
            let outcome = run_training(&cfg, seed, &dir, None, ens.as_ref())?;
            print_json(&json!({
                "run_dir": outcome.dir,
                "manifest": outcome.manifest,
                "final_q": outcome.output.final_metric("q_mean"),
                "final_return": outcome.output.final_metric("return"),
            }))?;
            if let Some(reason) = outcome.output.divergence {
                return Err(LabError::Divergence(reason));
            }
            Ok(())
        }
        Command::Eval { run, episodes, seed } => {
            let est = evaluate_run(&run, episodes, seed)?;
            print_json(&serde_json::to_value(est)?)
        }
        Command::Sweep {
            param,
            values,
            config,
            seeds,
            epochs,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let name = serde_json::to_value(param)?;
            let root = out_root(out.as_deref()).join("sweeps").join(format!("{}-{}", name.as_str().unwrap_or("sweep"), cfg.hash()));
            std::fs::create_dir_all(&root)?;
            let entries = run_sweep(&cfg, param, &values, &root)?;
            print_json(&json!({"sweep_dir": root, "entries": entries}))
        }
        Command::Verify { sandwich, q_bound, seed } => {
            let report = verify_all(sandwich, q_bound, seed)?;
            print_json(&serde_json::to_value(&report)?)?;
            if !report.passed {
                return Err(LabError::OracleFailure("oracle suite reported violations".into()));
            }
            Ok(())
        }
        Command::Report { runs, out, force } => {
            let prefix = out.unwrap_or_else(|| out_root(None).join("report"));
            let rows = report(&runs, &prefix, force)?;
            print_json(&json!({
                "csv": prefix.with_extension("csv"),
                "json": prefix.with_extension("json"),
                "rows": rows.len(),
            }))
        }
    }
}

fn fail(kind: &str, message: &str, code: i32) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code()),
    }
}
