use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segagg_core::experiment::{self, Data, ExperimentConfig};

#[derive(Parser)]
#[command(name = "segagg", version, about = "Segment-aggregation speaker verification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus.
    Generate(Args),
    /// Train the configured regime.
    Train(Args),
    /// Score checkpoints on the test split and write the EER grid.
    Evaluate(Args),
    /// Corpus, every configured system, then the grid.
    Reproduce(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoints to evaluate, one grid row each (default: best checkpoint per configured system).
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let m = experiment::generate(&cfg)?;
            println!("wrote {} utterances to {}", m.entries.len(), cfg.corpus_dir().display());
        }
        Command::Train(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let out = experiment::cmd_train(&cfg)?;
            for entry in &out.log {
                println!("{entry}");
            }
            println!(
                "regime {} done: final loss {:.6}, best checkpoint {}",
                cfg.train.regime,
                out.final_loss(),
                cfg.checkpoint_path(cfg.train.regime, "best").display()
            );
        }
        Command::Evaluate(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let checkpoints = if a.checkpoints.is_empty() {
                cfg.eval.systems.iter().map(|&r| cfg.checkpoint_path(r, "best")).collect()
            } else {
                a.checkpoints
            };
            let data = Data::load(&cfg)?;
            let report = experiment::evaluate_checkpoints(&cfg, &checkpoints, &data)?;
            print!("{}", report.to_csv());
        }
        Command::Reproduce(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let report = experiment::reproduce(&cfg)?;
            print!("{}", report.to_csv());
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
