use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gatepro_core::harness::{self, RunConfig, TrainOptions, METRICS_FILE};
use gatepro_core::{Error, Result};

/// Baseline and competitive-gating mixture-of-experts experiments.
#[derive(Debug, Parser)]
#[command(name = "gatepro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a stack from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also save `step<N>.ckpt` before step N runs. Repeatable.
        #[arg(long = "checkpoint-at", value_name = "STEP")]
        checkpoint_at: Vec<u64>,
    },
    /// Compare two run directories and print a JSON report.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Metrics log utilities.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
}

#[derive(Debug, Subcommand)]
enum MetricsCommand {
    /// Convert a run's metrics log.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    Csv,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs `f` against the output file, or stdout when no path is given.
fn with_output(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
            f(&mut w)?;
            w.flush().map_err(io_err(path))
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush().map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            checkpoint_at,
        } => {
            let cfg = RunConfig::load(&config)?;
            let summary = harness::train_with(&cfg, &TrainOptions { resume, checkpoint_at })?;
            println!(
                "trained steps {}..{} into {} (final loss {:.6}, {} metric rows)",
                summary.first_step,
                summary.first_step + summary.steps_run,
                summary.run_dir.display(),
                summary.final_loss,
                summary.metrics_rows
            );
            Ok(())
        }
        Command::Compare { a, b, out } => {
            let report = harness::compare(&a, &b)?;
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            let target = out.as_deref();
            with_output(target, |w| {
                writeln!(w, "{json}").map_err(io_err(target.unwrap_or(Path::new("<stdout>"))))
            })
        }
        Command::Eval { ckpt, tokens, seed } => {
            let acc = harness::eval_accuracy(&ckpt, tokens, seed)?;
            println!("{acc}");
            Ok(())
        }
        Command::Metrics {
            command: MetricsCommand::Export { run, format, out },
        } => {
            let rows = harness::read_metrics(&run.join(METRICS_FILE))?;
            match format {
                ExportFormat::Csv => with_output(out.as_deref(), |w| harness::export_csv(&rows, w)),
            }
        }
    }
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
