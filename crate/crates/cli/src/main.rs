use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adda::data::ShiftKind;
use adda::experiment::{self, ExperimentConfig, RunReport, Split};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Adversarial discriminative domain adaptation on digit and synthetic shifts.
#[derive(Parser)]
#[command(name = "adda", version)]
struct Cli {
    /// Parallelise kernels across cores.
    #[arg(long, global = true)]
    fast: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the source encoder and classifier.
    TrainSource {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `[output] dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a target encoder from a source checkpoint.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a shift.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shift: String,
        #[arg(long, value_parser = ["source", "target"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Supplies data paths and sample caps; the shift flag still wins.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run source-only and every preset method, writing one comparison table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path) -> Result<ExperimentConfig> {
    experiment::parse_config(config).with_context(|| format!("reading config {}", config.display()))
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match flag.or_else(|| cfg.output_dir.clone()) {
        Some(dir) => Ok(dir),
        None => bail!("no output directory: pass --out or set `dir` under [output]"),
    }
}

fn summarize(r: &RunReport) {
    match &r.eval {
        Some(e) => println!(
            "{} {}: accuracy {:.3}, mean class accuracy {:.3}{}",
            r.shift,
            r.method,
            e.overall,
            e.mean_class_accuracy(),
            if r.converged { "" } else { " (did not converge)" }
        ),
        None => println!("{} {}: failed", r.shift, r.method),
    }
}

fn run(cli: Cli) -> Result<()> {
    adda::tensor::set_parallel(cli.fast);
    match cli.command {
        Command::TrainSource { config, out } => {
            let cfg = load(&config)?;
            let out = out_dir(out, &cfg)?;
            summarize(&experiment::cmd_train_source(&cfg, &out)?);
            println!("wrote {}", out.join(experiment::SOURCE_CHECKPOINT).display());
        }
        Command::Adapt {
            config,
            source_ckpt,
            out,
        } => {
            let cfg = load(&config)?;
            let out = out_dir(out, &cfg)?;
            summarize(&experiment::cmd_adapt(&cfg, &source_ckpt, &out)?);
            println!("wrote {}", out.join(experiment::TARGET_CHECKPOINT).display());
        }
        Command::Eval {
            ckpt,
            shift,
            split,
            out,
            config,
            seed,
        } => {
            let shift: ShiftKind = shift.parse()?;
            let split: Split = split.parse()?;
            let cfg = config.as_deref().map(load).transpose()?;
            let seed = cfg.as_ref().map_or(seed, |c| c.seed);
            summarize(&experiment::cmd_eval(&ckpt, shift, split, cfg.as_ref(), seed, &out)?);
        }
        Command::Compare { config, out } => {
            let cfg = load(&config)?;
            let out = out_dir(out, &cfg)?;
            let reports = experiment::cmd_compare(&cfg, &out)?;
            reports.iter().for_each(summarize);
            println!("wrote {}", out.join("compare.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
