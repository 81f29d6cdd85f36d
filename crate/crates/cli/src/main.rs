use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wonham_cli::{list_experiments, run, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "wonham", version, about = "Robustness experiments for misspecified Wonham filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write <experiment>-<seed>.{json,csv}
    Run {
        config: PathBuf,
        /// Experiment name; defaults to `experiment.name` in the config
        experiment: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        /// Compare against the bounds with no integrator allowance and allow coarse steps
        #[arg(long)]
        strict_tolerance: bool,
    },
    /// List registered experiments
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for (name, description) in list_experiments() {
                println!("{name:<24}{description}");
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, experiment, out, seed, trials, dt, strict_tolerance } => {
            let result = RunConfig::load(&config).and_then(|c| {
                run(c, experiment.as_deref(), &out, Overrides { seed, trials, dt }, strict_tolerance)
            });
            match result {
                Ok(output) => {
                    println!("{}: {} violation(s)", output.report.experiment, output.report.violations);
                    println!("wrote {}", output.json_path.display());
                    println!("wrote {}", output.csv_path.display());
                    if output.report.violations > 0 {
                        eprintln!("bound violations detected");
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
