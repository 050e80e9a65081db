use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use obsmpc::cli::{compare_command, parse_seed_range, run_command, CliError, RunArgs};
use obsmpc::simulation::Mode;

#[derive(Parser)]
#[command(name = "obsmpc", version, about = "Observability-seeking MPC with moving-horizon estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration, optionally over a range of seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// nominal-only | observability-seeking
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, conflicts_with = "seed_sweep")]
        seed: Option<u64>,
        /// Inclusive range, e.g. 0..19
        #[arg(long)]
        seed_sweep: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also solve every window to convergence and log the minimiser.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a configuration field, e.g. --set noise.nu=0
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Run both modes on the same seeds and write a paired comparison.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            mode,
            seed,
            seed_sweep,
            steps,
            oracle,
            out,
            set,
        } => {
            let seeds = match (seed, seed_sweep) {
                (Some(s), _) => Some(vec![s]),
                (None, Some(r)) => Some(parse_seed_range(&r)?),
                (None, None) => None,
            };
            let args = RunArgs {
                mode,
                seeds,
                steps,
                oracle,
                out,
                set,
            };
            for dir in run_command(&config, &args)? {
                println!("{}", dir.display());
            }
        }
        Command::Compare {
            config,
            seeds,
            out,
            set,
        } => {
            let seeds = seeds.as_deref().map(parse_seed_range).transpose()?;
            let s = compare_command(&config, seeds, out, &set)?;
            println!(
                "active better on {}/{} seeds; feasibility {:.2} (active) vs {:.2} (nominal)",
                s.active_better,
                s.seeds.len(),
                s.active.mean_feasibility_rate,
                s.nominal.mean_feasibility_rate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
