//! Command-line driver: dataset generation, training, probing, and reports.

use clap::{Parser, Subcommand};
use scn_core::run::{self, RunConfig};
use scn_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "scn", version, about = "Slot-structured representation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out probe datasets for a config.
    Gen {
        /// Config file (key = value text, or a run.json from an earlier run).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model variant (random-cnn merely saves its initialization).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit linear probes against a checkpoint and write metrics.
    Probe {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Labeled dataset directory to probe on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine completed runs into one comparison table on stdout.
    Report {
        /// Run directories, each containing a metrics.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn load(config: &PathBuf, out: Option<PathBuf>) -> scn_core::Result<RunConfig> {
    let mut cfg = run::load_config(config)?;
    if let Some(out) = out {
        cfg.paths.out = out;
    }
    Ok(cfg)
}

// Every code path is already deterministic (single thread, counter-seeded RNG
// streams), so SCN_DETERMINISTIC=1 is accepted without changing anything.
fn run_command(cmd: Command) -> scn_core::Result<()> {
    match cmd {
        Command::Gen { config } => {
            let cfg = load(&config, None)?;
            print!("{}", run::cmd_gen(&cfg)?);
        }
        Command::Train { config, resume, out } => {
            let cfg = load(&config, out)?;
            let record = run::cmd_train(&cfg, resume.as_deref())?;
            match record.final_loss {
                Some(l) => println!(
                    "trained {} to step {} (loss {}) in {:.1}s; outputs in {}",
                    record.variant,
                    record.completed_steps,
                    l.total,
                    record.wall_time_seconds,
                    cfg.paths.out.display()
                ),
                None => println!(
                    "saved untrained {} initialization; outputs in {}",
                    record.variant,
                    cfg.paths.out.display()
                ),
            }
        }
        Command::Probe { ckpt, data, config, out } => {
            let cfg = load(&config, out)?;
            let report = run::cmd_probe(&ckpt, &data, &cfg, &cfg.paths.out)?;
            print!("{}", report.to_json());
        }
        Command::Report { dirs } => {
            print!("{}", run::cmd_report(&dirs)?);
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
