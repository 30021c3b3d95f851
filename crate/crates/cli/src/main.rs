use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ixplore_cli::config::SEED_ENV;
use ixplore_cli::{cmd_audit, cmd_diversity, cmd_primitives, cmd_run, Options};

#[derive(Parser)]
#[command(name = "ixplore", version, about = "Incentivized exploration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every replicate and write rounds.csv and summary.json.
    Run(Common),
    /// Estimate the BIC gaps at the configured round and write audit.json.
    Audit(Common),
    /// Exact or Monte Carlo primitives and thresholds, written to primitives.json.
    Primitives(Common),
    /// Spectrum of the warm-up Gram matrix, written to diversity.json.
    Diversity(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Experiment file (JSON).
    config: PathBuf,
    /// Override a config value: key.path=value (value parsed as JSON).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; beats the environment and the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (run, common): (fn(&Options) -> _, Common) = match cli.command {
        Command::Run(c) => (cmd_run, c),
        Command::Audit(c) => (cmd_audit, c),
        Command::Primitives(c) => (cmd_primitives, c),
        Command::Diversity(c) => (cmd_diversity, c),
    };
    let opts = Options {
        config: common.config,
        overrides: common.overrides,
        seed: common.seed,
        seed_env: std::env::var(SEED_ENV).ok(),
        workers: common.workers.map(|w| w as usize),
    };
    match run(&opts) {
        Ok(done) => {
            println!("{}", done.line);
            for p in done.written {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
