use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctpo_lab::harness::{self, RunOptions};

#[derive(Parser)]
#[command(name = "ctpo-lab", version, about = "Importance-ratio and clipped-surrogate experiments on toy token MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides `threads` in the config).
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let summary = harness::run(&config, &RunOptions { out, seed, threads });
            if let Some(outcome) = &summary.outcome {
                for c in &outcome.checks {
                    println!(
                        "{} {}: {} {} {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.value,
                        c.comparison,
                        c.threshold
                    );
                }
            }
            if let Some(err) = &summary.error {
                eprintln!("error: {err}");
            }
            if let Some(dir) = &summary.out_dir {
                println!("artifacts: {}", dir.display());
            }
            ExitCode::from(summary.status.code() as u8)
        }
    }
}
