//! `care` — train class-aware graph classifiers, score embedding
//! separability, compare model capacity, run ablation grids, and sanity-check
//! datasets.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use care_core::cli::{
    cmd_ablate, cmd_metrics, cmd_parse, cmd_train, cmd_vcbound, cmd_vcbound_sweep,
};
use care_core::graphio::FeaturePolicy;
use care_core::Result;

#[derive(Parser)]
#[command(name = "care", version, about = "Class-aware graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run cross-validated training per a JSON config file.
    Train {
        /// Path to the run configuration (JSON).
        config: PathBuf,
        /// Output directory root (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute separability metrics for an `id,label,e0..` embedding CSV.
    Metrics {
        /// Embedding CSV file.
        embeddings: PathBuf,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare operation counts of the plain and refined models.
    Vcbound {
        /// Node count.
        #[arg(long, default_value_t = 10)]
        n: u64,
        /// Hidden width of the refined model.
        #[arg(long, default_value_t = 4)]
        h2: u64,
        /// Encoder depth.
        #[arg(long, default_value_t = 1)]
        d: u64,
        /// Check every cell of the n in [1,100] x h2 in [1,256] grid.
        #[arg(long)]
        sweep: bool,
    },
    /// Cross a parameter grid over a base config and rank the cells.
    Ablate {
        /// Path to the base run configuration (JSON).
        config: PathBuf,
        /// Path to the grid specification (JSON).
        grid: PathBuf,
        /// Output directory root (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a dataset directory and print its summary.
    Parse {
        /// Dataset directory.
        dir: PathBuf,
        /// Dataset name (file prefix inside the directory).
        name: String,
        /// Feature construction override.
        #[arg(long, value_parser = parse_policy)]
        features: Option<FeaturePolicy>,
        /// Emit the summary as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn parse_policy(s: &str) -> std::result::Result<FeaturePolicy, String> {
    match s {
        "onehot_label" => Ok(FeaturePolicy::OnehotLabel),
        "degree_onehot" => Ok(FeaturePolicy::DegreeOnehot),
        "constant" => Ok(FeaturePolicy::Constant),
        other => Err(format!(
            "unknown feature policy {other:?} (expected onehot_label, degree_onehot, or constant)"
        )),
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out.as_deref()),
        Command::Metrics { embeddings, out } => cmd_metrics(&embeddings, out.as_deref()),
        Command::Vcbound { n, h2, d, sweep } => {
            if sweep {
                cmd_vcbound_sweep(d)
            } else {
                cmd_vcbound(n, h2, d)
            }
        }
        Command::Ablate { config, grid, out } => cmd_ablate(&config, &grid, out.as_deref()),
        Command::Parse {
            dir,
            name,
            features,
            json,
        } => cmd_parse(&dir, &name, features, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful output, not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
