mod commands;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pnigen_core::pipeline::RunConfig;

use commands::{Evaluation, Stage};
use store::Run;

#[derive(Parser)]
#[command(name = "pnigen", version, about = "Phantom cohort, latent diffusion augmentation and PNI classification")]
struct Cli {
    /// TOML file overriding fields of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "paper", value_parser = ["desk", "paper"])]
    preset: String,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "PNIGEN_OUTPUT")]
    output: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic cohort as NIfTI volumes and label maps.
    Phantom,
    /// Normalize and crop every case to a tumor-centred patch.
    Tlcr,
    /// Train one model stage.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Fold number; all folds when omitted.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Generate synthetic cases for a fold.
    Generate {
        #[arg(long)]
        fold: usize,
        /// Ratio of the ladder; every configured ratio when omitted.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Write evaluation reports.
    Evaluate {
        #[arg(long, value_enum)]
        what: Evaluation,
    },
    /// Run every stage of every fold and all evaluations.
    Crossval,
    /// Print the resolved configuration and its hash.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::preset(&cli.preset)?;
    let cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text, &base).with_context(|| format!("in {}", p.display()))?
        }
        None => base,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        println!("# hash = {}", cfg.hash());
        return Ok(());
    }
    let root = cli.output.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let run = Run::new(&root, cfg, cli.force);
    match cli.command {
        Command::Phantom => commands::phantom(&run),
        Command::Tlcr => commands::tlcr(&run),
        Command::Train { stage, fold } => {
            for k in commands::folds_arg(&run, fold)? {
                commands::train(&run, stage, k)?;
            }
            Ok(())
        }
        Command::Generate { fold, ratio } => {
            let k = commands::folds_arg(&run, Some(fold))?[0];
            commands::generate(&run, k, &commands::ratios_arg(&run, ratio)?)
        }
        Command::Evaluate { what } => commands::evaluate(&run, what),
        Command::Crossval => commands::crossval(&run),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
