use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nina::config::RunConfig;
use nina::harness::{self, AblateAxis};

#[derive(Parser)]
#[command(name = "nina", about = "Flow action decoder: train, sample, eval, bench, ablate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + run record.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config keys: --set key=value (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Draw action chunks from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        context: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out NLL, NLL gap vs the task oracle, and success rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Latency benchmark: flow vs size-matched DDPMs over a T sweep.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
    },
    /// Sweep one axis (noise | depth | hidden), one CSV row per cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Export a generated dataset for reproducibility.
    Dataset {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 20000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, set: &[String]) -> nina::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    cfg.apply_overrides(set)?;
    Ok(cfg)
}

fn run(cli: Cli) -> nina::Result<()> {
    match cli.cmd {
        Cmd::Train { config, set } => {
            let cfg = load_config(&config, &set)?;
            harness::cmd_train(&cfg)?;
        }
        Cmd::Sample {
            checkpoint,
            count,
            seed,
            context,
            out,
        } => {
            harness::cmd_sample(&checkpoint, count, seed, context, out.as_deref())?;
        }
        Cmd::Eval { checkpoint } => {
            harness::cmd_eval(&checkpoint)?;
        }
        Cmd::Bench {
            config,
            set,
            trials,
            warmup,
        } => {
            let cfg = load_config(&config, &set)?;
            harness::cmd_bench(&cfg, trials, warmup)?;
        }
        Cmd::Ablate { config, axis, set } => {
            let cfg = load_config(&config, &set)?;
            let axis: AblateAxis = axis.parse()?;
            harness::cmd_ablate(&cfg, axis)?;
        }
        Cmd::Dataset {
            task,
            count,
            seed,
            out,
        } => {
            harness::cmd_dataset(&task, count, seed, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
