use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use lastmile_core::pipeline::{ExperimentConfig, Run, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    GenData,
    Pretrain,
    SynthNegatives,
    TrainReward,
    TrainPpo,
    TrainMle,
    Evaluate,
    Report,
    Verify,
}

impl From<Subcommand> for Stage {
    fn from(s: Subcommand) -> Self {
        match s {
            Subcommand::GenData => Stage::GenData,
            Subcommand::Pretrain => Stage::Pretrain,
            Subcommand::SynthNegatives => Stage::SynthNegatives,
            Subcommand::TrainReward => Stage::TrainReward,
            Subcommand::TrainPpo => Stage::TrainPpo,
            Subcommand::TrainMle => Stage::TrainMle,
            Subcommand::Evaluate => Stage::Evaluate,
            Subcommand::Report => Stage::Report,
            Subcommand::Verify => Stage::Verify,
        }
    }
}

/// Last-mile fine-tuning of a small language model: reward modelling on
/// synthetic negatives, PPO, and a maximum-likelihood baseline.
#[derive(Debug, Parser)]
#[command(name = "lastmile", version)]
struct Cli {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use this seed for data, model and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let stage = Stage::from(cli.subcommand);
    let run = Run::new(cfg, &cli.config, &cli.out);
    run.run(stage).with_context(|| format!("stage {stage} failed"))?;
    if stage == Stage::Verify {
        print!("{}", std::fs::read_to_string(run.path(lastmile_core::pipeline::artifacts::VERIFY_LOG))?);
    }
    eprintln!("{stage}: done ({})", cli.out.display());
    Ok(())
}
