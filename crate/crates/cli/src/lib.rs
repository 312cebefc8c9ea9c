//! Configuration and experiment drivers for the `anisolve` command-line tool.

pub mod commands;
pub mod config;
pub mod rhs;

pub use commands::{perf_tables, run_solve, sweep_cfl, weak_scale, PerfOptions, SolveReport};
pub use config::{ConfigError, ConfigOverrides, RhsMode, RunConfig, SolverChoice};
