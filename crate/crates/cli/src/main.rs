use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anisolve_cli::commands::{global_dof, to_csv, PerfOptions};
use anisolve_cli::{perf_tables, run_solve, sweep_cfl, weak_scale, ConfigOverrides, RhsMode, RunConfig, SolverChoice};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Environment variable holding the number of worker threads.
const THREADS_ENV: &str = "ANISOLVE_THREADS";

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "anisolve", version, about = "CG and multigrid solvers for anisotropic elliptic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one problem and write its convergence history.
    Solve(RunArgs),
    /// Iteration counts of both solvers over a range of CFL numbers.
    SweepCfl {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated CFL numbers.
        #[arg(long, value_delimiter = ',', default_value = "2.1,8.4,33.6")]
        cfl_list: Vec<f64>,
        /// Sweep both solvers instead of the configured one.
        #[arg(long)]
        both: bool,
    },
    /// Analytic cost and communication tables.
    PerfTables {
        #[arg(long, value_enum)]
        solver: Option<SolverChoice>,
        /// Local horizontal size(s) for the ratio table.
        #[arg(long = "nx", value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Use this many halo exchanges on every level.
        #[arg(long)]
        nhalo: Option<usize>,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Compare with the reference values and fail on a mismatch.
        #[arg(long)]
        check: bool,
        /// Directory for cost_<solver>.csv and ratio.csv instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fixed local size per rank, growing rank count.
    WeakScale {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated rank counts (perfect squares).
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        ranks_list: Vec<usize>,
        /// Columns per rank and direction.
        #[arg(long, default_value_t = 64)]
        local_nx: usize,
    },
}

/// Settings shared by the solving commands; unset flags fall back to the
/// config file and then to the defaults.
#[derive(Debug, Args)]
struct RunArgs {
    /// `key = value` file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solver [default: mg]
    #[arg(long, value_enum)]
    solver: Option<SolverChoice>,
    /// Horizontal cells per direction of the global grid [default: 128]
    #[arg(long)]
    nx: Option<usize>,
    /// Vertical cells [default: 128]
    #[arg(long)]
    nz: Option<usize>,
    /// Vertical CFL number, sets omega = cfl * h / 2 [default: 8.4]
    #[arg(long = "cfl")]
    nu_cfl: Option<f64>,
    /// Relative residual reduction to reach [default: 1e-5]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Multigrid levels [default: 5]
    #[arg(long)]
    levels: Option<usize>,
    /// Smoother applications on the coarsest level; chosen from the CFL number when absent
    #[arg(long)]
    coarse_smooths: Option<usize>,
    /// Simulated ranks, a perfect square [default: 1]
    #[arg(long)]
    ranks: Option<usize>,
    /// Iteration limit [default: 1000]
    #[arg(long)]
    max_iter: Option<usize>,
    /// Seed of the random right-hand side [default: 2024]
    #[arg(long)]
    seed: Option<u64>,
    /// Right-hand side [default: random]
    #[arg(long, value_enum)]
    rhs: Option<RhsMode>,
    /// Depth of the box [default: 0.01]
    #[arg(long)]
    depth: Option<f64>,
    /// Vertical coefficient [default: 1]
    #[arg(long)]
    lambda: Option<f64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            solver: self.solver,
            nx: self.nx,
            nz: self.nz,
            nu_cfl: self.nu_cfl,
            epsilon: self.epsilon,
            levels: self.levels,
            coarse_smooths: self.coarse_smooths,
            ranks: self.ranks,
            max_iter: self.max_iter,
            seed: self.seed,
            rhs: self.rhs,
            depth: self.depth,
            lambda: self.lambda,
            output: self.output.clone(),
        }
    }

    fn resolve(&self) -> std::result::Result<RunConfig, anisolve_cli::ConfigError> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

fn write_csv(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn status(ok: bool) -> u8 {
    if ok {
        0
    } else {
        EXIT_FAILED
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Solve(args) => {
            let config = match args.resolve() {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let report = run_solve(&config)?;
            write_csv(config.output.as_deref(), &report.history.to_csv())?;
            eprintln!("{}", report.summary());
            Ok(status(report.converged()))
        }
        Command::SweepCfl { run, cfl_list, both } => {
            let config = match run.resolve() {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            if cfl_list.iter().any(|&nu| !(nu > 0.0)) {
                return usage("CFL numbers must be positive");
            }
            let solvers = if both { vec![SolverChoice::Cg, SolverChoice::Mg] } else { vec![config.solver] };
            let rows = sweep_cfl(&config, &cfl_list, &solvers)?;
            write_csv(config.output.as_deref(), &to_csv(&rows)?)?;
            Ok(status(rows.iter().all(|r| r.converged)))
        }
        Command::PerfTables { solver, sizes, nhalo, levels, check, output } => {
            let mut options = PerfOptions { solver, n_halo: nhalo, levels, ..Default::default() };
            if !sizes.is_empty() {
                options.sizes = sizes;
            }
            if levels == 0 || options.sizes.contains(&0) {
                return usage("levels and sizes must be positive");
            }
            let report = perf_tables(&options)?;
            match &output {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    for t in &report.cost_tables {
                        write_csv(Some(&dir.join(format!("cost_{}.csv", t.solver.name()))), &t.to_csv())?;
                    }
                    write_csv(Some(&dir.join("ratio.csv")), &report.ratio_csv)?;
                }
                None => {
                    for t in &report.cost_tables {
                        println!("# cost per cell, {}", t.solver.name());
                        print!("{}", t.to_csv());
                        println!();
                    }
                    println!("# communication ratio R x 10^4");
                    print!("{}", report.ratio_csv);
                }
            }
            if !check {
                return Ok(0);
            }
            for m in &report.mismatches {
                eprintln!("mismatch: {m}");
            }
            eprintln!("check: {}", if report.mismatches.is_empty() { "ok" } else { "failed" });
            Ok(status(report.mismatches.is_empty()))
        }
        Command::WeakScale { run, ranks_list, local_nx } => {
            let base = match run.resolve() {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            for &p in &ranks_list {
                let Ok(s) = anisolve::parallel::square_side(p) else {
                    return usage(format!("rank count {p} is not a perfect square"));
                };
                let probe = RunConfig { ranks: p, nx: s * local_nx, ..base.clone() };
                if let Err(e) = probe.validate() {
                    return usage(e);
                }
            }
            let rows = weak_scale(&base, &ranks_list, local_nx)?;
            write_csv(base.output.as_deref(), &to_csv(&rows)?)?;
            let counts: Vec<usize> = rows.iter().map(|r| r.iterations).collect();
            let (lo, hi) = (counts.iter().min(), counts.iter().max());
            if let (Some(lo), Some(hi)) = (lo, hi) {
                eprintln!(
                    "iterations {lo}..{hi} over ranks {:?}; largest problem {} unknowns",
                    ranks_list,
                    rows.last().map_or(0, |r| global_dof(r.ranks, r.local_nx, r.nz))
                );
            }
            for r in rows.iter().filter(|r| !r.consistent()) {
                eprintln!(
                    "p = {}: {} iterations against {} on a single domain (converged: {})",
                    r.ranks, r.iterations, r.reference_iterations, r.converged
                );
            }
            Ok(status(rows.iter().all(|r| r.consistent())))
        }
    }
}

fn usage(message: impl std::fmt::Display) -> Result<u8> {
    eprintln!("error: {message}");
    Ok(EXIT_USAGE)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
