//! `tracksim` command-line entry point.
//!
//! Exit status: 0 on success, 1 on invalid input (including usage errors),
//! 2 on numerical failure. Failures print one JSON line on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracksim::batch::Precision;

#[derive(Debug, Parser)]
#[command(name = "tracksim", version, about = "Differentiable tracked-robot simulation on heightmap terrain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario JSON file or built-in preset name.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Integration step [s].
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Rollout horizon [s].
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    /// Seed for world generation, sampling and shooting.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batched rollouts.
    #[arg(long, global = true, env = "TRACKSIM_THREADS")]
    pub threads: Option<usize>,
    /// Scalar type of batched rollouts.
    #[arg(long, global = true, env = "TRACKSIM_PRECISION")]
    pub precision: Option<Precision>,
    /// Leave timestamps and wall-clock times out of every output.
    #[arg(long, global = true)]
    pub reproducible: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scenario's control schedule.
    Simulate {
        /// Also write the binary trajectory format.
        #[arg(long)]
        binary: bool,
    },
    /// Compare tape gradients with central finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Fit terrain layers so the simulated path matches a reference.
    Identify {
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// One sampling-based control selection toward the first waypoint.
    Shoot,
    /// Receding-horizon waypoint following.
    Navigate,
    /// Batched rollout throughput sweep.
    Bench(commands::BenchArgs),
    /// Rasterise a point cloud or lift-splat camera depths onto a grid.
    Splat(commands::SplatArgs),
    /// Trajectory and heightmap error metrics against a reference.
    Evaluate,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            kind: "validation",
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure {
            kind: "numerical",
            message: message.into(),
        }
    }

    fn code(&self) -> u8 {
        if self.kind == "numerical" {
            2
        } else {
            1
        }
    }
}

impl From<tracksim::Error> for Failure {
    fn from(e: tracksim::Error) -> Self {
        Failure {
            kind: if e.is_numerical() { "numerical" } else { "validation" },
            message: e.to_string(),
        }
    }
}

fn report(f: &Failure) {
    let line = serde_json::json!({ "error": f.kind, "message": f.message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            report(&Failure::validation(first));
            println!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            report(&Failure::validation("--threads must be at least 1"));
            return ExitCode::from(1);
        }
        // The global pool can only be set once; a second call is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let c = &cli.common;
    let result = match cli.command {
        Command::Simulate { binary } => commands::simulate(c, binary),
        Command::Gradcheck(a) => commands::gradcheck(c, &a),
        Command::Identify { iterations } => commands::identify(c, iterations),
        Command::Shoot => commands::shoot(c),
        Command::Navigate => commands::navigate(c),
        Command::Bench(a) => commands::bench(c, &a),
        Command::Splat(a) => commands::splat(c, &a),
        Command::Evaluate => commands::evaluate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code())
        }
    }
}
