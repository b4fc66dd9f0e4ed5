use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use txfreq_cli::{format_solution, load_config, report, run, solve, CliError};

#[derive(Parser)]
#[command(name = "txfreq", version, about = "Negotiate and monitor device write rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the transport seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the full scenario offline and compare with the baselines.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "admm")]
        solver: String,
    },
    /// Build per-figure tables from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config)?;
            let outcome = run(&cfg, &out, seed)?;
            print!("{}", format_solution(&outcome.solution, &cfg));
            for (id, est) in &outcome.artifacts.estimates {
                println!("estimated[{id}] = {est:.4}");
            }
            println!("alerts: {}", outcome.artifacts.alerts().count());
            println!("artifacts in {}", out.display());
        }
        Command::Solve { config, solver } => {
            let cfg = load_config(&config)?;
            print!("{}", format_solution(&solve(&cfg, &solver, None)?, &cfg));
        }
        Command::Report { out } => print!("{}", report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
