use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmlreid::cli::{cmd_ablate, cmd_orders, cmd_run, cmd_sweep, SweepParam};
use cmlreid::config::{ExperimentConfig, Variant};

#[derive(Parser)]
#[command(name = "cmlreid", version, about = "Lifelong cloth-aware ReID on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in learning order, 1 to 6.
    #[arg(long)]
    order: Option<usize>,
    /// full, sft, no_casp, no_ctx, no_akfp, no_lproj or single_prototype.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output root; each run writes to its own hashed subdirectory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    epoch_scale: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Lambda,
    Beta,
}

#[derive(Subcommand)]
enum Command {
    /// Train one sequence and write matrix, analyses, checkpoint and manifest.
    Run(Common),
    /// All six orders for full and sft.
    Orders(Common),
    /// Full plus the five ablations.
    Ablate(Common),
    /// Sensitivity sweep over lambda or beta.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn load(common: &Common) -> cmlreid::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.order {
        cfg.order = v;
        cfg.domains = None;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(v) = &common.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = common.epoch_scale {
        cfg.epoch_scale = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> cmlreid::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (dir, m) = cmd_run(&load(&common)?)?;
            println!("{} ({} files, hash {})", dir.display(), m.files.len(), m.content_hash);
        }
        Command::Orders(common) => {
            let (dir, _, csv) = cmd_orders(&load(&common)?)?;
            print!("{csv}");
            println!("{}", dir.display());
        }
        Command::Ablate(common) => {
            let (dir, _, csv) = cmd_ablate(&load(&common)?)?;
            print!("{csv}");
            println!("{}", dir.display());
        }
        Command::Sweep { common, param, values } => {
            let param = match param {
                Param::Lambda => SweepParam::Lambda,
                Param::Beta => SweepParam::Beta,
            };
            let values = values.unwrap_or_else(|| param.defaults().to_vec());
            let (dir, _, csv) = cmd_sweep(&load(&common)?, param, &values)?;
            print!("{csv}");
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
