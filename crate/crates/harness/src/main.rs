use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use itap_harness::checkpoint::{Checkpoint, CheckpointFile, CHECKPOINT_MAGIC};
use itap_harness::config::RunConfig;
use itap_harness::dataset::{Dataset, DATASET_MAGIC};
use itap_harness::eval::{bench_latency, evaluate_policy, latency_csv, latency_table, EvalSpec, LatencySpec};
use itap_harness::pipeline::generate_dataset;
use itap_harness::train::{loss_curve_csv, train_prior, train_rqvae};
use itap_harness::{HarnessError, Result};

#[derive(Parser, Debug)]
#[command(name = "itap", version, about = "Latent-token planning: data, training, evaluation, benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides ITAP_SEED and the config file.
    #[arg(long, global = true, env = "ITAP_SEED")]
    seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Code stack depth D.
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Codebook size K.
    #[arg(long, global = true)]
    codebook: Option<usize>,
    /// Primitive steps per macro-action L.
    #[arg(long, global = true)]
    macro_len: Option<usize>,
    /// Context window C. At evaluation, caps the executed history the planner sees.
    #[arg(long, global = true)]
    context: Option<usize>,
    /// Search horizon H in macro steps; 0 disables search.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// MCTS simulations per decision.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Comma-separated perturbation levels f_max.
    #[arg(long, global = true, value_name = "LIST")]
    regimes: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the behavior policies and write an offline dataset.
    GenData {
        /// Episodes per (regime, tier) cell.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the tokenizer and write a checkpoint.
    TrainRqvae {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Also write the loss curve as CSV.
        #[arg(long, value_name = "PATH")]
        curve: Option<PathBuf>,
    },
    /// Train the prior on a tokenizer checkpoint and write a full checkpoint.
    TrainPrior {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Evaluate the planner in closed loop.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Time planning calls over context sizes, horizons and candidate counts.
    BenchLatency {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "LIST", default_value = "1,3,6,12")]
        contexts: String,
        #[arg(long, value_name = "LIST", default_value = "1,3")]
        horizons: String,
        #[arg(long, value_name = "LIST", default_value = "16")]
        candidates: String,
        #[arg(long, default_value_t = 30)]
        calls: usize,
    },
    /// Summarize a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

fn list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| HarnessError::Usage(format!("--{flag}: cannot parse '{p}'")))
        })
        .collect()
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Overrides that change the trained models; applied before data generation and training.
fn apply_model_overrides(cfg: &mut RunConfig, common: &Common) -> Result<()> {
    if let Some(v) = common.depth {
        cfg.depth = v;
    }
    if let Some(v) = common.codebook {
        cfg.codebook_size = v;
    }
    if let Some(v) = common.macro_len {
        cfg.macro_len = v;
    }
    if let Some(v) = common.context {
        cfg.context_len = v;
    }
    apply_planner_overrides(cfg, common);
    if let Some(r) = &common.regimes {
        cfg.regimes = list("regimes", r)?;
    }
    cfg.validate()
}

fn apply_planner_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(v) = common.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = common.iterations {
        cfg.iterations = v;
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| HarnessError::Usage("missing required flag --out".into()))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

fn checkpoint_config(ckpt: &Checkpoint, common: &Common) -> Result<RunConfig> {
    let mut cfg = ckpt.config.clone();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (flag, set) in [("depth", common.depth.is_some()), ("codebook", common.codebook.is_some()), ("macro-len", common.macro_len.is_some())] {
        if set {
            return Err(HarnessError::Usage(format!(
                "--{flag} changes the trained model; retrain instead of overriding at evaluation"
            )));
        }
    }
    apply_planner_overrides(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData { episodes } => {
            let mut cfg = base_config(common)?;
            if let Some(n) = episodes {
                cfg.episodes_per_cell = *n;
            }
            apply_model_overrides(&mut cfg, common)?;
            let out = require_out(common)?;
            let ds = generate_dataset(&cfg)?;
            ds.write(out)?;
            print!("{}", ds.summary());
        }
        Command::TrainRqvae { data, curve } => {
            let mut cfg = base_config(common)?;
            apply_model_overrides(&mut cfg, common)?;
            let out = require_out(common)?;
            let ds = Dataset::read(data)?;
            let run = train_rqvae(&cfg, &ds)?;
            if let Some(path) = curve {
                std::fs::write(path, loss_curve_csv(&run.curve))?;
            }
            let ckpt = Checkpoint {
                config: cfg,
                rqvae: run.model,
                prior: None,
            };
            ckpt.write(out)?;
            if let (Some(first), Some(last)) = (run.curve.first(), run.curve.last()) {
                println!("tokenizer loss: {:.6} -> {:.6}", first.total, last.total);
            }
        }
        Command::TrainPrior { data, checkpoint } => {
            let out = require_out(common)?;
            let ckpt = Checkpoint::read(checkpoint)?;
            let cfg = checkpoint_config(&ckpt, common)?;
            let ds = Dataset::read(data)?;
            let run = train_prior(&cfg, &ds, &ckpt.rqvae)?;
            if let (Some(first), Some(last)) = (run.curve.first(), run.curve.last()) {
                println!(
                    "prior per-slot NLL: {first:.6} -> {last:.6} (uniform {:.6})",
                    (cfg.codebook_size as f64).ln()
                );
            }
            let ckpt = Checkpoint {
                config: cfg,
                rqvae: ckpt.rqvae,
                prior: Some(run.model),
            };
            ckpt.write(out)?;
        }
        Command::Eval {
            checkpoint,
            seeds,
            episodes,
        } => {
            let ckpt = Checkpoint::read(checkpoint)?;
            let cfg = checkpoint_config(&ckpt, common)?;
            let mut spec = EvalSpec::from_config(&cfg);
            if let Some(r) = &common.regimes {
                spec.regimes = list("regimes", r)?;
            }
            if let Some(n) = seeds {
                spec.seeds = *n;
            }
            if let Some(n) = episodes {
                spec.episodes = *n;
            }
            spec.context_cap = common.context;
            let report = evaluate_policy(&cfg, &ckpt.rqvae, ckpt.prior()?, &cfg.planner_config(), &spec)?;
            let text = report.to_text();
            print!("{text}{}", report.latency_text());
            if let Some(out) = &common.out {
                std::fs::write(out, &text)?;
                std::fs::write(with_extension(out, ".csv"), report.to_csv())?;
            }
        }
        Command::BenchLatency {
            checkpoint,
            contexts,
            horizons,
            candidates,
            calls,
        } => {
            let ckpt = Checkpoint::read(checkpoint)?;
            let cfg = checkpoint_config(&ckpt, common)?;
            let spec = LatencySpec {
                contexts: list("contexts", contexts)?,
                horizons: list("horizons", horizons)?,
                candidates: list("candidates", candidates)?,
                calls: *calls,
                ..LatencySpec::default()
            };
            let rows = bench_latency(&cfg, &ckpt.rqvae, ckpt.prior()?, &spec)?;
            print!("{}", latency_table(&rows));
            if let Some(out) = &common.out {
                std::fs::write(out, latency_table(&rows) + "config:\n" + &cfg.to_text())?;
                std::fs::write(with_extension(out, ".csv"), latency_csv(&rows))?;
            }
        }
        Command::Inspect { path } => {
            let bytes = std::fs::read(path)?;
            if bytes.starts_with(&DATASET_MAGIC) {
                print!("{}", Dataset::from_bytes(&bytes)?.summary());
            } else if bytes.starts_with(&CHECKPOINT_MAGIC) {
                let file = CheckpointFile::from_bytes(&bytes)?;
                for b in &file.blocks {
                    println!("block {}", b.name);
                }
                print!("{}", Checkpoint::from_file(&file)?.summary());
            } else {
                return Err(HarnessError::Format(format!("{} is neither a dataset nor a checkpoint", path.display())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
