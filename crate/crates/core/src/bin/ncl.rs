use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncl::numerics::OpKind;
use ncl::run::{cmd_ablate, cmd_generate, cmd_gradcheck, cmd_report, cmd_train, RunConfig};
use ncl::train::Variant;
use ncl::{Error, Result};

/// Noise-aware contrastive learning toolkit on a synthetic retrieval benchmark.
#[derive(Parser)]
#[command(name = "ncl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of both generation and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run directory to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// baseline, wcb_only, nfb_only or full.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train all four variants and write an ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of this op (test hook).
        #[arg(long, hide = true, value_parser = parse_op)]
        fault: Option<OpKind>,
    },
    /// Summarize a run or ablation directory.
    Report {
        /// Directory written by `train` or `ablate`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op `{s}`; expected one of {}", names.join(", "))
    })
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn require<'a>(flag: Option<&'a Path>, fallback: Option<&'a Path>, name: &str) -> Result<&'a Path> {
    flag.or(fallback)
        .ok_or_else(|| Error::Config(format!("missing --{name} (or `{name}` key in the config)")))
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = &mut io::stdout().lock();
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load(&common)?;
            let path = require(out.as_deref(), cfg.dataset_path.as_deref(), "out")?;
            cmd_generate(&cfg, path, stdout)?;
        }
        Command::Train {
            common,
            dataset,
            out,
            variant,
        } => {
            let mut cfg = load(&common)?;
            if let Some(v) = variant {
                cfg.set_variant(v);
            }
            let data = require(dataset.as_deref(), cfg.dataset_path.as_deref(), "dataset")?;
            let dir = require(out.as_deref(), cfg.out_dir.as_deref(), "out")?;
            cmd_train(&cfg, data, dir, stdout)?;
        }
        Command::Ablate {
            common,
            dataset,
            out,
        } => {
            let cfg = load(&common)?;
            let data = require(dataset.as_deref(), cfg.dataset_path.as_deref(), "dataset")?;
            let dir = require(out.as_deref(), cfg.out_dir.as_deref(), "out")?;
            cmd_ablate(&cfg, data, dir, stdout)?;
        }
        Command::Gradcheck { common, fault } => {
            let cfg = load(&common)?;
            return Ok(cmd_gradcheck(cfg.train.seed, fault, stdout)?.passed);
        }
        Command::Report { out } => cmd_report(&out, stdout)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // A failed gradient check is a numerical failure.
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
