//! Command-line front end: seeded training runs, the honesty sweep, and the
//! oracle self-check suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msglab::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "msglab", about = "Signaling-game training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Algorithm: pg, pgoc, dial, sg, or sgoc.
    #[arg(long)]
    algo: Option<String>,
    /// Environment: recletter, goals3, or goals5.
    #[arg(long)]
    env: Option<String>,
    /// Seed range, half-open (e.g. 0..15).
    #[arg(long)]
    seeds: Option<String>,
    /// Constraint penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Honesty slack on the mean constraint.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seeds trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (falls back to $MSGLAB_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, harness::HarnessError> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("algo", self.algo.clone());
        push("env", self.env.clone());
        push("seeds", self.seeds.clone());
        push("lambda", self.lambda.map(|x| x.to_string()));
        push("epsilon", self.epsilon.map(|x| x.to_string()));
        push("jobs", self.jobs.map(|x| x.to_string()));
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("MSGLAB_OUT").map(PathBuf::from));
        push("out", out.map(|p| p.to_string_lossy().into_owned()));
        ExperimentConfig::from_file_and_overrides(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm over a seed range and write per-seed CSVs.
    Run(RunArgs),
    /// Grid the constraint penalty and slack, recording final honesty.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda_grid: Vec<f64>,
        /// Comma-separated epsilon values.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon_grid: Vec<f64>,
    },
    /// Run the closed-form and estimator self-checks.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, harness::HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let results = harness::run_experiment(&cfg)?;
            for (seed, rows) in cfg.seeds().iter().zip(results.iter()) {
                match rows.last() {
                    Some(last) => println!(
                        "seed {seed}: episodes {}, sender {:.4}, receiver {:.4}, honesty {:.4}",
                        last.episode, last.reward_sender, last.reward_receiver, last.honesty
                    ),
                    None => println!("seed {seed}: no evaluation points"),
                }
            }
            println!("wrote {} seed files to {}", results.len(), cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            run,
            lambda_grid,
            epsilon_grid,
        } => {
            let cfg = run.config()?;
            let cells = harness::run_honesty_sweep(&cfg, &lambda_grid, &epsilon_grid)?;
            for c in &cells {
                println!("lambda {:>6} epsilon {:>6} honesty {:.4}", c.lambda, c.epsilon, c.honesty);
            }
            println!("wrote sweep.csv to {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle => {
            let checks = harness::run_oracle_suite();
            let mut failed = 0;
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", c.name, c.detail);
                if !c.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                eprintln!("{failed} oracle check(s) failed");
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}
