//! Command line front end: loads a run configuration, applies seed, sample,
//! and thread overrides, and dispatches to one of the batch workflows.
//!
//! Exit codes: 0 all targets solved, 1 computational failure with partial
//! output written, 2 configuration error with no output.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use stewart_stack::commands::{
    cmd_compare, cmd_feasible, cmd_linearity, cmd_perturb, cmd_solve, cmd_sweep, CommandError,
    ResultBundle,
};
use stewart_stack::config::{load_config, RunConfig};

const SEED_ENV: &str = "STEWART_STACK_SEED";
const THREADS_ENV: &str = "STEWART_STACK_THREADS";

#[derive(Parser)]
#[command(
    name = "stewart-stack",
    version,
    about = "Sensitivity-minimizing inverse kinematics for Stewart platform stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file; TOML, or JSON with a .json extension.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; a seed set in the config file wins over this flag,
    /// this flag wins over STEWART_STACK_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides every sample count (noise levels and sweep).
    #[arg(long)]
    samples: Option<usize>,
    /// Worker thread count; wins over STEWART_STACK_THREADS. Defaults to
    /// all cores. Results do not depend on this value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the sensitivity-minimizing pose for each target.
    Solve(CommonArgs),
    /// Collect distinct feasible (no-objective) poses for each target.
    Feasible(CommonArgs),
    /// Optimal versus feasible poses under one shared noise stream.
    Compare(CommonArgs),
    /// Perturbation experiment on each target's optimal pose.
    Perturb(CommonArgs),
    /// Predicted versus observed covariance per pose and noise level.
    Linearity(CommonArgs),
    /// Grid sweep of FN and median-distance ratios with regression.
    Sweep(CommonArgs),
}

impl Command {
    fn split(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Solve(a) => ("solve", a),
            Command::Feasible(a) => ("feasible", a),
            Command::Compare(a) => ("compare", a),
            Command::Perturb(a) => ("perturb", a),
            Command::Linearity(a) => ("linearity", a),
            Command::Sweep(a) => ("sweep", a),
        }
    }
}

fn env_parsed<T: std::str::FromStr>(name: &str) -> Result<Option<T>, String> {
    match std::env::var(name) {
        Ok(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| format!("{name} must be an unsigned integer, got {raw:?}")),
        Err(_) => Ok(None),
    }
}

fn run() -> i32 {
    let cli = Cli::parse();
    let (name, args) = cli.command.split();

    let env_seed = match env_parsed::<u64>(SEED_ENV) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let env_threads = match env_parsed::<usize>(THREADS_ENV) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };

    let mut config: RunConfig = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    config.resolve_seed(args.seed, env_seed);
    config.resolve_samples(args.samples);

    if let Some(threads) = args.threads.or(env_threads).filter(|&t| t > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    let result: Result<ResultBundle, CommandError> = match name {
        "solve" => cmd_solve(&config, &out),
        "feasible" => cmd_feasible(&config, &out),
        "compare" => cmd_compare(&config, &out),
        "perturb" => cmd_perturb(&config, &out),
        "linearity" => cmd_linearity(&config, &out),
        "sweep" => cmd_sweep(&config, &out),
        _ => unreachable!("subcommands are exhaustive"),
    };
    match result {
        Ok(bundle) => {
            let status = if bundle.all_converged {
                "ok"
            } else {
                "incomplete"
            };
            println!("{name} {status}; results in {}", out.display());
            if bundle.all_converged {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
