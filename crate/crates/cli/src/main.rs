use std::path::PathBuf;
use std::process::ExitCode;

use aphomlab::{catalog, output_dir, run, ExperimentConfig, RunOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aphomlab", version, about = "Numerical homogenization experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for independent rows.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the experiment catalog.
    List,
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", catalog::catalog_text());
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match ExperimentConfig::load(&config).and_then(|c| c.validate()) {
            Ok(()) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run { config, out, jobs, seed } => {
            let opts = RunOptions { out_dir: out, jobs, seed };
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run(&cfg, &opts) {
                Ok(m) => {
                    for c in &m.checks {
                        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                    }
                    println!("{} files, manifest in {}", m.files.len(), output_dir(&cfg, &opts).display());
                    if m.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
