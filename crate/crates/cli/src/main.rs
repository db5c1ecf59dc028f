//! `sinkadmm` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinkadmm::config::{load_config, Overrides};
use sinkadmm::pde_flows::{count_groupings, enumerate_groupings};
use sinkadmm::solve::solve;
use sinkadmm::validation::{run_checks, ValidateOptions};

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

#[derive(Parser)]
#[command(name = "sinkadmm", version, about = "Consensus ADMM for Wasserstein proximal problems and gradient flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and write snapshots and metrics.
    Solve(SolveArgs),
    /// Run the oracle suite.
    Validate {
        /// Check the power-law proximal oracle against a sign-flipped
        /// recursion; the check is expected to fail.
        #[arg(long)]
        inject_sign_flip: bool,
    },
    /// Count and list the ways to split summands among computers.
    EnumerateGroupings {
        /// Number of summand functionals.
        n: usize,
        /// Largest number of computers; defaults to `n`.
        r: Option<usize>,
        /// Leave out the single-group (centralized) split.
        #[arg(long)]
        exclude_centralized: bool,
    },
}

#[derive(Args)]
struct SolveArgs {
    /// Configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset; replaces the preset of the file if both are given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Solve(args) => cmd_solve(args),
        Command::Validate { inject_sign_flip } => cmd_validate(inject_sign_flip),
        Command::EnumerateGroupings {
            n,
            r,
            exclude_centralized,
        } => cmd_enumerate(n, r.unwrap_or(n), exclude_centralized),
    }
}

fn cmd_solve(args: SolveArgs) -> ExitCode {
    let overrides = Overrides {
        preset: args.preset,
        threads: args.threads,
        output: args.output,
        snapshot_every: args.snapshot_every,
        max_outer_iters: args.max_iters,
    };
    let config = match load_config(args.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let summary = match solve(&config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SOLVER);
        }
    };
    let last = &summary.final_snapshot;
    println!("output       {}", summary.output.display());
    println!("iterations   {}", summary.iterations);
    println!("snapshots    {}", summary.snapshots);
    println!("objective    {:.10}", last.objective);
    println!("max W^2      {:.6e} (W = {:.6e})", last.max_pairwise, last.max_pairwise.sqrt());
    for (i, row) in last.pairwise.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4e}")).collect();
        println!("W^2 row {:<4} {}", i + 1, cells.join(" "));
    }
    if let Some(d) = &last.reference_distances {
        let cells: Vec<String> = d.iter().map(|v| format!("{v:.4e}")).collect();
        println!("W^2 to ref   {}", cells.join(" "));
    }
    println!("tau bound    {:.4}{}", summary.tau_bound, if summary.tau_below_bound { " (tau below)" } else { "" });
    println!("wall time    {:.2}s", summary.wall_time);
    ExitCode::SUCCESS
}

fn cmd_validate(inject_sign_flip: bool) -> ExitCode {
    let checks = run_checks(&ValidateOptions {
        flip_power_law_sign: inject_sign_flip,
    });
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    }
}

fn cmd_enumerate(n: usize, r: usize, exclude_centralized: bool) -> ExitCode {
    let count = match count_groupings(n, r, exclude_centralized) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    println!("{count} groupings of {n} summands on at most {r} computers");
    if n > 8 {
        return ExitCode::SUCCESS;
    }
    let groupings = enumerate_groupings(n, r).expect("arguments were checked by count_groupings");
    for g in groupings.iter().filter(|g| !(exclude_centralized && g.len() == 1)) {
        let blocks: Vec<String> = g
            .iter()
            .map(|b| {
                let items: Vec<String> = b.iter().map(|i| (i + 1).to_string()).collect();
                format!("{{{}}}", items.join(","))
            })
            .collect();
        println!("{}", blocks.join(" "));
    }
    ExitCode::SUCCESS
}
