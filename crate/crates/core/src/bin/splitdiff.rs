use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use splitdiff::experiment::{cmd_baseline, cmd_eval, cmd_sample, cmd_train, BaselineMode, RunError};

/// Split-timestep collaborative diffusion experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every cut of the configured grid.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run and print trend verdicts.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate images from a trained cut.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        c: f64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        client: usize,
    },
    /// Plain local or centralized training with the run's seeds.
    Baseline {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Local,
    Central,
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train { config, out } => {
            let dir = cmd_train(config, out)?;
            println!("run written to {}", dir.display());
        }
        Command::Eval { run } => {
            let summary = cmd_eval(&run)?;
            println!("c\tkid_train_sum\tkid_holdout_sum\tdisclosure_mse\tclient_flops\tserver_flops");
            for r in &summary.rows {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                    r.c, r.kid_train_sum, r.kid_holdout_sum, r.disclosure_mse, r.client_flops, r.server_flops
                );
            }
            for v in &summary.verdicts {
                println!("{v}");
            }
        }
        Command::Sample { run, c, n, client } => {
            let out = cmd_sample(&run, c, n, client)?;
            println!(
                "{} final and {} boundary images, trajectory sheet in {}",
                out.finals.len(),
                out.boundaries.len(),
                out.dir.display()
            );
        }
        Command::Baseline { mode, config, out } => {
            let mode = match mode {
                Mode::Local => BaselineMode::Local,
                Mode::Central => BaselineMode::Central,
            };
            let dir = cmd_baseline(mode, config, out)?;
            println!("baseline written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
