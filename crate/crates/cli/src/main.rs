use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bridge_cli::config::RunConfig;
use bridge_cli::run;

/// Sequence-on-graph models: train, evaluate, generate data, and check
/// gradients, all reproducible from one config seed.
#[derive(Parser)]
#[command(name = "bridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss history, and a
    /// validation report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Path to a checkpoint's manifest.json.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Where to write the report (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate even if the config digest differs from the one the
        /// checkpoint was trained with.
        #[arg(long)]
        allow_digest_mismatch: bool,
    },
    /// Generate a synthetic dataset in the ingestion file format.
    Synth {
        /// Path to a generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients against finite differences on a
    /// tiny config; exits nonzero if any parameter group is off.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, bridge_cli::CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out_dir = out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
                bridge_cli::CliError::Config {
                    reason: "out_dir: set it in the config or pass --out".into(),
                }
            })?;
            let artifacts = run::run_train(&cfg, &out_dir)?;
            if let (Some(first), Some(last)) =
                (artifacts.outcome.history.first(), artifacts.outcome.history.last())
            {
                println!(
                    "trained {} epochs: loss {first} -> {last}",
                    artifacts.outcome.history.len()
                );
            }
            println!("checkpoint: {}", artifacts.manifest_path.display());
            println!("loss history: {}", artifacts.history_path.display());
            println!("validation report: {}", artifacts.valid_report.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            allow_digest_mismatch,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (report, path) =
                run::run_eval(&checkpoint, &cfg, allow_digest_mismatch, out.as_deref())?;
            println!("{}", report.to_json());
            eprintln!("report written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { spec, seed, out } => {
            let (nodes, edges) = run::run_synth(&spec, seed, &out)?;
            println!("nodes: {}", nodes.display());
            println!("edges: {}", edges.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run::run_gradcheck(&cfg)?;
            for (group, err) in &report.groups {
                println!("{group}\t{err:.3e}");
            }
            if report.pass() {
                println!("gradcheck PASS (all groups < {:.0e})", report.tolerance);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck FAIL (tolerance {:.0e})", report.tolerance);
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
