//! Experiment drivers behind the CLI subcommands.

use std::sync::Arc;

use anisolve::parallel::CommStats;
use anisolve::perfmodel::{
    cost_table, ratio_table, ratio_table_csv, CostTable, KernelCost, PerfCounters, Phase, SolverKind,
    RATIO_TABLE_REFERENCE, RATIO_TABLE_SIZES,
};
use anisolve::{
    cg_solve, flat_box_geometry, mg_solve, run_ranks, BlockJacobiPreconditioner, Communicator, ConvergenceHistory,
    Field, Geometry, MultigridHierarchy, RankTopology, SerialComm, SolveOutcome, StencilOperator,
};
use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::{RhsMode, RunConfig, SolverChoice};
use crate::rhs::{local_rhs, manufactured_solution};

/// Result of one solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub config: RunConfig,
    /// Coarsest-level smoother iterations actually used (multigrid only).
    pub coarse_smooths: Option<usize>,
    pub history: ConvergenceHistory,
    /// Iteration-phase counters summed over all ranks.
    pub counters: PerfCounters,
    pub flops_per_cell: f64,
    /// The whole-domain solution.
    pub solution: Field,
    /// `max |u - u*| / max |u*|` for the manufactured right-hand side.
    pub solution_error: Option<f64>,
    /// Largest mean halo traffic of any rank, bytes per iteration.
    pub halo_bytes_per_iteration: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.history.converged
    }

    pub fn iterations(&self) -> usize {
        self.history.iterations
    }

    /// One `key=value` line describing the run.
    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "solver={} nx={} nz={} nu_cfl={} ranks={} rhs={}",
            c.solver,
            c.nx,
            c.nz,
            c.nu_cfl,
            c.ranks,
            c.rhs.name()
        );
        if let Some(cs) = self.coarse_smooths {
            s.push_str(&format!(" levels={} coarse_smooths={cs}", c.levels));
        }
        s.push_str(&format!(
            " iterations={} converged={} final_relative_residual={:.6e} flops_per_cell={:.4}",
            self.history.iterations, self.history.converged, self.history.final_relative_residual, self.flops_per_cell
        ));
        if let Some(e) = self.solution_error {
            s.push_str(&format!(" solution_error={e:.6e}"));
        }
        s
    }
}

fn global_geometry(config: &RunConfig) -> Result<Geometry> {
    Ok(flat_box_geometry(config.nx, config.nz, config.nu_cfl, config.depth, config.lambda)?)
}

/// The solve of one rank, for any communicator.
fn solve_rank<C: Communicator>(
    config: &RunConfig,
    global: &Geometry,
    topology: &RankTopology,
    comm: &mut C,
) -> anisolve::Result<SolveOutcome> {
    let rank = comm.rank();
    let f = local_rhs(config.rhs, config.seed, global, topology, rank);
    let stop = config.stop_criteria();
    match config.solver {
        SolverChoice::Cg => {
            let op = StencilOperator::new(topology.local_geometry(global), *topology.local_shape(), 0)?;
            let m = BlockJacobiPreconditioner::new(Arc::new(op), anisolve::smoother::DEFAULT_RHO_RELAX)?;
            cg_solve(&m, &f, stop, comm)
        }
        SolverChoice::Mg => {
            let mut h = MultigridHierarchy::for_rank(global, topology, config.multigrid_config())?;
            mg_solve(&mut h, &f, stop, comm)
        }
    }
}

fn mean_halo_bytes(stats: &CommStats, iterations: usize) -> f64 {
    if iterations == 0 {
        return 0.0;
    }
    let total: u64 = (1..=iterations).map(|it| stats.halo_bytes(it)).sum();
    total as f64 / iterations as f64
}

/// Runs the configured solver, on one domain or on `config.ranks` simulated ranks.
pub fn run_solve(config: &RunConfig) -> Result<SolveReport> {
    config.validate()?;
    let global = global_geometry(config)?;
    let topology = RankTopology::from_ranks(config.ranks, config.global_shape())?;
    let results: Vec<(SolveOutcome, CommStats)> = if config.ranks == 1 {
        let mut comm = SerialComm::new();
        let out = solve_rank(config, &global, &topology, &mut comm)?;
        vec![(out, comm.stats().clone())]
    } else {
        run_ranks(&topology, |comm| {
            let out = solve_rank(config, &global, &topology, comm)?;
            Ok((out, comm.stats().clone()))
        })?
    };

    let history = results[0].0.history.clone();
    let mut counters = PerfCounters::new();
    for (out, _) in &results {
        counters.merge(&out.counters);
    }
    let cells = config.global_shape().interior_len() as f64;
    let flops_per_cell = if history.iterations == 0 {
        0.0
    } else {
        counters.totals(Phase::Iteration).flops / (history.iterations as f64 * cells)
    };
    let halo_bytes_per_iteration = results
        .iter()
        .map(|(_, stats)| mean_halo_bytes(stats, history.iterations))
        .fold(0.0, f64::max);
    let locals: Vec<Field> = results.iter().map(|(o, _)| o.u.clone()).collect();
    let solution = topology.gather(&locals)?;

    let solution_error = if config.rhs == RhsMode::Manufactured {
        let serial = RankTopology::new(1, config.global_shape())?;
        let exact = manufactured_solution(&global, &serial, 0);
        let diff = Field::axpy(-1.0, &exact, &solution)?;
        Some(diff.max_abs() / exact.max_abs())
    } else {
        None
    };
    Ok(SolveReport {
        config: config.clone(),
        coarse_smooths: (config.solver == SolverChoice::Mg).then(|| config.multigrid_config().coarse_smooths),
        history,
        counters,
        flops_per_cell,
        solution,
        solution_error,
        halo_bytes_per_iteration,
    })
}

/// One row of the CFL sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub solver: String,
    pub nu_cfl: f64,
    #[serde(rename = "L")]
    pub levels: Option<usize>,
    pub coarse_smooths: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the configured problem for every CFL number and solver.
pub fn sweep_cfl(config: &RunConfig, cfls: &[f64], solvers: &[SolverChoice]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &nu in cfls {
        for &solver in solvers {
            let c = RunConfig { nu_cfl: nu, solver, ..config.clone() };
            let report = run_solve(&c).with_context(|| format!("{solver} at nu_cfl = {nu}"))?;
            rows.push(SweepRow {
                solver: solver.name().into(),
                nu_cfl: nu,
                levels: (solver == SolverChoice::Mg).then_some(c.levels),
                coarse_smooths: report.coarse_smooths,
                iterations: report.iterations(),
                converged: report.converged(),
            });
        }
    }
    Ok(rows)
}

/// Options of the model-table command.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfOptions {
    /// Restrict the output to one solver.
    pub solver: Option<SolverChoice>,
    pub sizes: Vec<usize>,
    /// Replaces every per-level halo exchange count.
    pub n_halo: Option<usize>,
    pub levels: usize,
}

impl Default for PerfOptions {
    fn default() -> Self {
        Self {
            solver: None,
            sizes: RATIO_TABLE_SIZES.to_vec(),
            n_halo: None,
            levels: anisolve::multigrid::DEFAULT_LEVELS,
        }
    }
}

/// Cost tables, ratio table and the outcome of the reference comparison.
#[derive(Debug, Clone)]
pub struct PerfReport {
    pub cost_tables: Vec<CostTable>,
    pub ratio_csv: String,
    /// One message per value that misses its reference.
    pub mismatches: Vec<String>,
}

pub const CG_COST_REFERENCE: KernelCost = KernelCost::new(54.0, 24.0, 15.0);
pub const MG_COST_REFERENCE: KernelCost = KernelCost::new(149.4, 67.2, 29.6);
pub const MG_COST_TOLERANCE: f64 = 0.002;
pub const RATIO_TOLERANCE: f64 = 0.1;

pub fn perf_tables(options: &PerfOptions) -> Result<PerfReport> {
    let wanted = |s: SolverChoice| options.solver.is_none_or(|w| w == s);
    let mut mismatches = Vec::new();
    let mut cost_tables = Vec::new();
    if wanted(SolverChoice::Cg) {
        let t = cost_table(SolverKind::Cg, 1)?;
        if t.total != CG_COST_REFERENCE {
            mismatches.push(format!("cg cost {:?} differs from {:?}", t.total, CG_COST_REFERENCE));
        }
        cost_tables.push(t);
    }
    if wanted(SolverChoice::Mg) {
        let t = cost_table(SolverKind::Multigrid, options.levels)?;
        let pairs = [
            ("flops", t.total.flops, MG_COST_REFERENCE.flops),
            ("mem", t.total.mem, MG_COST_REFERENCE.mem),
            ("mem_cached", t.total.mem_cached, MG_COST_REFERENCE.mem_cached),
        ];
        for (name, got, want) in pairs {
            if ((got - want) / want).abs() > MG_COST_TOLERANCE {
                mismatches.push(format!("mg {name} {got} is not within 0.2% of {want}"));
            }
        }
        cost_tables.push(t);
    }
    if options.sizes.is_empty() {
        bail!("no local sizes given");
    }
    let rows: Vec<_> = ratio_table(&options.sizes, options.levels, options.n_halo)?
        .into_iter()
        .filter(|r| wanted(if r.solver == "cg" { SolverChoice::Cg } else { SolverChoice::Mg }))
        .collect();
    for row in &rows {
        let reference = RATIO_TABLE_REFERENCE.iter().find(|(name, _)| *name == row.solver);
        for (&n, &got) in options.sizes.iter().zip(&row.values) {
            let pos = RATIO_TABLE_SIZES.iter().position(|&m| m == n);
            if let (Some((_, values)), Some(pos)) = (reference, pos) {
                if (got - values[pos]).abs() > RATIO_TOLERANCE {
                    mismatches.push(format!("{} R at n = {n}: {got:.2} vs {}", row.solver, values[pos]));
                }
            }
        }
    }
    Ok(PerfReport {
        cost_tables,
        ratio_csv: ratio_table_csv(&options.sizes, &rows),
        mismatches,
    })
}

/// One row of the weak-scaling run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakRow {
    pub ranks: usize,
    pub local_nx: usize,
    pub global_nx: usize,
    pub nz: usize,
    pub global_dof: u64,
    pub iterations: usize,
    /// Iterations of the same global problem on a single domain.
    pub reference_iterations: usize,
    pub converged: bool,
    pub halo_bytes_per_rank_per_iteration: f64,
}

impl WeakRow {
    pub fn consistent(&self) -> bool {
        self.converged && self.iterations == self.reference_iterations
    }
}

/// Global unknowns of `p` ranks with `local_nx^2 x nz` cells each.
pub fn global_dof(p: usize, local_nx: usize, nz: usize) -> u64 {
    (p * local_nx * local_nx * nz) as u64
}

/// Fixed local size per rank; the global grid grows with the rank count.
pub fn weak_scale(config: &RunConfig, ranks: &[usize], local_nx: usize) -> Result<Vec<WeakRow>> {
    let mut rows = Vec::new();
    for &p in ranks {
        let s = anisolve::parallel::square_side(p)?;
        let c = RunConfig { ranks: p, nx: s * local_nx, ..config.clone() };
        let report = run_solve(&c)?;
        let reference = if p == 1 {
            report.iterations()
        } else {
            run_solve(&RunConfig { ranks: 1, ..c.clone() })?.iterations()
        };
        rows.push(WeakRow {
            ranks: p,
            local_nx,
            global_nx: c.nx,
            nz: c.nz,
            global_dof: global_dof(p, local_nx, c.nz),
            iterations: report.iterations(),
            reference_iterations: reference,
            converged: report.converged(),
            halo_bytes_per_rank_per_iteration: report.halo_bytes_per_iteration,
        });
    }
    Ok(rows)
}

/// Serialises `rows` as CSV with a header.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(solver: SolverChoice) -> RunConfig {
        RunConfig { solver, nx: 16, nz: 8, levels: 3, ..Default::default() }
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        for solver in [SolverChoice::Cg, SolverChoice::Mg] {
            let r = run_solve(&RunConfig { rhs: RhsMode::Zero, ..small(solver) }).unwrap();
            assert!(r.converged());
            assert_eq!(r.iterations(), 0);
            assert_eq!(r.flops_per_cell, 0.0);
        }
    }

    #[test]
    fn ranks_reproduce_the_serial_run() {
        for solver in [SolverChoice::Cg, SolverChoice::Mg] {
            let serial = run_solve(&small(solver)).unwrap();
            let split = run_solve(&RunConfig { ranks: 4, ..small(solver) }).unwrap();
            assert_eq!(serial.iterations(), split.iterations());
            assert_eq!(serial.halo_bytes_per_iteration, 0.0);
            assert!(split.halo_bytes_per_iteration > 0.0);
            assert!((serial.flops_per_cell - split.flops_per_cell).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_flops_per_cell() {
        let r = run_solve(&small(SolverChoice::Cg)).unwrap();
        assert_eq!(r.flops_per_cell, 54.0);
        assert!(r.summary().contains("flops_per_cell=54.0000"));
    }

    #[test]
    fn single_point_sweep_equals_solve() {
        let c = small(SolverChoice::Mg);
        let rows = sweep_cfl(&c, &[8.4], &[SolverChoice::Mg]).unwrap();
        let r = run_solve(&c).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].iterations, r.iterations());
        assert_eq!(rows[0].coarse_smooths, Some(2));
        let csv = to_csv(&rows).unwrap();
        assert!(csv.starts_with("solver,nu_cfl,L,coarse_smooths,iterations,converged\n"));
    }

    #[test]
    fn perf_tables_match_references() {
        let r = perf_tables(&PerfOptions::default()).unwrap();
        assert!(r.mismatches.is_empty(), "{:?}", r.mismatches);
        let one = perf_tables(&PerfOptions { solver: Some(SolverChoice::Cg), sizes: vec![512], ..Default::default() })
            .unwrap();
        assert_eq!(one.ratio_csv, "solver,512\ncg,5.2\n");
        let zero = perf_tables(&PerfOptions { n_halo: Some(0), ..Default::default() }).unwrap();
        assert!(zero.ratio_csv.lines().skip(1).all(|l| l.split(',').skip(1).all(|v| v == "0.0")));
        assert!(!zero.mismatches.is_empty());
    }

    #[test]
    fn dof_column() {
        assert_eq!(global_dof(16, 256, 128), 134_217_728);
    }
}
