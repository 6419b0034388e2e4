use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hymik::run::{finish, run_benchmark, run_experiment, run_simulation, with_threads, RunConfig, SimulateArgs};

#[derive(Parser)]
#[command(name = "hymik", version, about = "Fit and benchmark type IV space-time models for areal counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model (or both methods with --compare) and write a JSON report
    Fit(RunConfig),
    /// Simulate replicated Poisson counts from scaled, constrained priors
    Simulate(SimulateArgs),
    /// Time both methods (warm-up, then median of the timed runs)
    Bench {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit(cfg) => {
            let outcome = with_threads(cfg.threads, || run_experiment(&cfg)).and_then(|r| r);
            code(finish(&cfg, outcome))
        }
        Command::Bench { mut run, runs, warmup } => {
            run.compare = true;
            run.timings = true;
            let outcome = with_threads(run.threads, || run_benchmark(&run, warmup, runs)).and_then(|r| r);
            code(finish(&run, outcome))
        }
        Command::Simulate(args) => match run_simulation(&args) {
            Ok(truth) => {
                println!(
                    "wrote {} ({} times x {} regions x {} replicates)",
                    args.out.display(),
                    truth.n_t,
                    truth.n_s,
                    truth.n_replicates
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
