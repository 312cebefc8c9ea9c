//! Analytic cost model and run-time counters.
//!
//! Every kernel is charged a fixed number of floating point operations and
//! memory references per grid cell it touches. Composing these per level of
//! the hierarchy gives the cost of one solver iteration per fine-grid cell;
//! the same per-cell charges, multiplied by the cells actually processed,
//! give the measured counters. A second model compares halo traffic with
//! memory traffic to predict the communication overhead.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul};

use crate::error::{Error, Result};

/// Floating point operations and memory references per grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelCost {
    pub flops: f64,
    /// References without any reuse between neighbouring stencil reads.
    pub mem: f64,
    /// Minimal references when every value is loaded once per kernel.
    pub mem_cached: f64,
}

impl KernelCost {
    pub const fn new(flops: f64, mem: f64, mem_cached: f64) -> Self {
        Self {
            flops,
            mem,
            mem_cached,
        }
    }

    pub const ZERO: KernelCost = KernelCost::new(0.0, 0.0, 0.0);
}

impl Add for KernelCost {
    type Output = KernelCost;
    fn add(self, o: KernelCost) -> KernelCost {
        KernelCost::new(self.flops + o.flops, self.mem + o.mem, self.mem_cached + o.mem_cached)
    }
}

impl AddAssign for KernelCost {
    fn add_assign(&mut self, o: KernelCost) {
        *self = *self + o;
    }
}

impl Mul<f64> for KernelCost {
    type Output = KernelCost;
    fn mul(self, s: f64) -> KernelCost {
        KernelCost::new(self.flops * s, self.mem * s, self.mem_cached * s)
    }
}

/// The solver kernels that are charged individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kernel {
    /// `u += alpha p; p = z + beta p; q = A z + beta q; sigma = <p, q>`
    FusedSpmv,
    /// `r -= alpha q; z = M^-1 r; <r, r>; <r, z>`
    FusedTridiag,
    Smooth,
    RestrictSmooth,
    Residual,
    Prolongate,
    ResidualNorm,
}

impl Kernel {
    pub const ALL: [Kernel; 7] = [
        Kernel::FusedSpmv,
        Kernel::FusedTridiag,
        Kernel::Smooth,
        Kernel::RestrictSmooth,
        Kernel::Residual,
        Kernel::Prolongate,
        Kernel::ResidualNorm,
    ];

    pub fn cost(self) -> KernelCost {
        match self {
            Kernel::FusedSpmv => KernelCost::new(32.0, 12.0, 6.0),
            Kernel::FusedTridiag => KernelCost::new(22.0, 12.0, 9.0),
            Kernel::Smooth => KernelCost::new(37.0, 17.0, 8.0),
            Kernel::RestrictSmooth => KernelCost::new(17.0, 12.0, 6.0),
            Kernel::Residual => KernelCost::new(23.0, 9.0, 3.0),
            Kernel::Prolongate => KernelCost::new(6.0, 5.0, 3.0),
            Kernel::ResidualNorm => KernelCost::new(2.0, 1.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::FusedSpmv => "fused_spmv",
            Kernel::FusedTridiag => "fused_tridiag",
            Kernel::Smooth => "smooth",
            Kernel::RestrictSmooth => "restrict_smooth",
            Kernel::Residual => "residual",
            Kernel::Prolongate => "prolongate",
            Kernel::ResidualNorm => "residual_norm",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Cg,
    Multigrid,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Cg => "cg",
            SolverKind::Multigrid => "mg",
        }
    }
}

/// Which kernels make up one V-cycle on the finest level.
///
/// The reference fine-level row (122, 53, 23) is not the sum of the kernels
/// it is said to contain; the three variants keep the candidates apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineComposition {
    /// The reference row: `2 Smooth + 2 Residual + ResidualNorm`.
    Reference,
    /// `2 Smooth + Residual + Prolongate + ResidualNorm`.
    KernelSum,
    /// What [`crate::multigrid::mg_solve`] runs per iteration:
    /// `2 Smooth + 2 Residual + Prolongate + ResidualNorm`, the second
    /// residual feeding the convergence test.
    Executed,
}

impl FineComposition {
    pub fn kernels(self) -> Vec<(Kernel, f64)> {
        use Kernel::*;
        match self {
            FineComposition::Reference => vec![(Smooth, 2.0), (Residual, 2.0), (ResidualNorm, 1.0)],
            FineComposition::KernelSum => {
                vec![(Smooth, 2.0), (Residual, 1.0), (Prolongate, 1.0), (ResidualNorm, 1.0)]
            }
            FineComposition::Executed => {
                vec![(Smooth, 2.0), (Residual, 2.0), (Prolongate, 1.0), (ResidualNorm, 1.0)]
            }
        }
    }
}

/// Cost of one level of a solver iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCost {
    /// Multigrid level, 0 being the coarsest.
    pub level: usize,
    /// Cells of this level per fine-grid cell.
    pub weight: f64,
    pub kernels: Vec<(Kernel, f64)>,
    /// Per cell of this level.
    pub cost: KernelCost,
}

/// Per-level costs and their weighted aggregate per fine-grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub solver: SolverKind,
    pub levels: Vec<LevelCost>,
    pub total: KernelCost,
}

impl CostTable {
    /// Rows `kernel,level,flops,mem,mem_cached`: one per kernel and level
    /// (counts folded in), one `level_total` per level and the weighted total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kernel,level,flops,mem,mem_cached\n");
        let row = |out: &mut String, name: &str, level: &str, c: KernelCost| {
            out.push_str(&format!("{name},{level},{},{},{}\n", fmt_num(c.flops), fmt_num(c.mem), fmt_num(c.mem_cached)));
        };
        for l in self.levels.iter().rev() {
            for &(k, n) in &l.kernels {
                row(&mut out, k.name(), &l.level.to_string(), k.cost() * n);
            }
            row(&mut out, "level_total", &l.level.to_string(), l.cost);
        }
        row(&mut out, "total", "all", self.total);
        out
    }
}

fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    format!("{r}")
}

fn compose(kernels: &[(Kernel, f64)]) -> KernelCost {
    kernels
        .iter()
        .fold(KernelCost::ZERO, |acc, &(k, n)| acc + k.cost() * n)
}

/// Cost table with the reference fine-level row and two coarse smooths.
pub fn cost_table(solver: SolverKind, levels: usize) -> Result<CostTable> {
    cost_table_with(solver, levels, 2, FineComposition::Reference)
}

/// Cost table for `levels` levels with `coarse_smooths` smoother
/// applications on the coarsest level (the fused restriction counting as
/// the first) and one pre- and one post-smoothing step elsewhere.
pub fn cost_table_with(
    solver: SolverKind,
    levels: usize,
    coarse_smooths: usize,
    fine: FineComposition,
) -> Result<CostTable> {
    let level_rows = match solver {
        SolverKind::Cg => {
            let kernels = vec![(Kernel::FusedSpmv, 1.0), (Kernel::FusedTridiag, 1.0)];
            vec![LevelCost {
                level: 0,
                weight: 1.0,
                cost: compose(&kernels),
                kernels,
            }]
        }
        SolverKind::Multigrid => {
            if levels == 0 {
                return Err(Error::Parameter("a multigrid hierarchy needs at least one level".into()));
            }
            if coarse_smooths == 0 {
                return Err(Error::Parameter("the coarsest level needs at least one smooth".into()));
            }
            (0..levels)
                .map(|level| {
                    let kernels = if level == 0 {
                        let mut k = vec![(Kernel::RestrictSmooth, 1.0)];
                        if coarse_smooths > 1 {
                            k.push((Kernel::Smooth, (coarse_smooths - 1) as f64));
                        }
                        k
                    } else if level + 1 == levels {
                        fine.kernels()
                    } else {
                        vec![
                            (Kernel::RestrictSmooth, 1.0),
                            (Kernel::Residual, 1.0),
                            (Kernel::Prolongate, 1.0),
                            (Kernel::Smooth, 1.0),
                        ]
                    };
                    LevelCost {
                        level,
                        weight: 0.25f64.powi((levels - 1 - level) as i32),
                        cost: compose(&kernels),
                        kernels,
                    }
                })
                .collect()
        }
    };
    let total = level_rows
        .iter()
        .fold(KernelCost::ZERO, |acc, l| acc + l.cost * l.weight);
    Ok(CostTable {
        solver,
        levels: level_rows,
        total,
    })
}

/// Halo and bandwidth parameters of the communication model.
#[derive(Debug, Clone, PartialEq)]
pub struct CommModel {
    pub halo_size: usize,
    /// Halo exchanges per iteration on each level, coarsest first.
    pub n_halo: Vec<usize>,
    /// Bytes per value; it scales traffic and memory terms alike.
    pub elem_bytes: usize,
    pub bw_mem: f64,
    pub bw_mpi: f64,
}

impl CommModel {
    /// One exchange per iteration on a single level.
    pub fn cg() -> Self {
        Self {
            halo_size: 1,
            n_halo: vec![1],
            elem_bytes: 8,
            bw_mem: 1.0,
            bw_mpi: 1.0,
        }
    }

    /// Four exchanges per V-cycle on every level but the coarsest, two there.
    pub fn multigrid(levels: usize) -> Self {
        Self {
            n_halo: (0..levels).map(|l| if l == 0 { 2 } else { 4 }).collect(),
            ..Self::cg()
        }
    }

    pub fn for_solver(solver: SolverKind, levels: usize) -> Self {
        match solver {
            SolverKind::Cg => Self::cg(),
            SolverKind::Multigrid => Self::multigrid(levels),
        }
    }

    /// The same number of exchanges on every level.
    pub fn with_uniform_halo(mut self, n: usize) -> Self {
        self.n_halo.iter_mut().for_each(|h| *h = n);
        self
    }

    pub fn with_bandwidths(mut self, bw_mem: f64, bw_mpi: f64) -> Self {
        self.bw_mem = bw_mem;
        self.bw_mpi = bw_mpi;
        self
    }

    /// Ratio of halo traffic to memory traffic per iteration for a local
    /// `n x n` subdomain, summed over levels. Multigrid uses as many levels
    /// as `n_halo` has entries.
    pub fn ratio(&self, solver: SolverKind, n: usize) -> Result<f64> {
        let table = cost_table(solver, self.n_halo.len())?;
        if table.levels.len() != self.n_halo.len() {
            return Err(Error::Parameter(format!(
                "{} levels of cost data but {} halo counts",
                table.levels.len(),
                self.n_halo.len()
            )));
        }
        let top = table.levels.len() - 1;
        let mut traffic = 0.0;
        let mut memory = 0.0;
        for (l, nh) in table.levels.iter().zip(&self.n_halo) {
            let nl = n >> (top - l.level);
            if nl == 0 {
                return Err(Error::Parameter(format!("{n} columns cannot be coarsened {top} times")));
            }
            traffic += self.face_traffic(nl, *nh);
            memory += (nl * nl) as f64 * l.cost.mem_cached * self.elem_bytes as f64;
        }
        Ok(traffic / memory)
    }

    /// The ratio restricted to the finest multigrid level.
    pub fn fine_level_ratio(&self, n: usize) -> f64 {
        let fine = compose(&FineComposition::Reference.kernels());
        let nh = self.n_halo.last().copied().unwrap_or(0);
        self.face_traffic(n, nh) / ((n * n) as f64 * fine.mem_cached * self.elem_bytes as f64)
    }

    fn face_traffic(&self, n: usize, n_halo: usize) -> f64 {
        (2 * (n + n) * self.halo_size * n_halo * self.elem_bytes) as f64
    }

    pub fn overhead(&self, r: f64) -> Result<f64> {
        predicted_overhead(r, self.bw_mem, self.bw_mpi)
    }
}

/// Halo-to-memory traffic ratio with halo width one and eight-byte values.
/// `schedule` lists exchanges per level, coarsest first (one entry for CG).
pub fn ratio_r(solver: SolverKind, n: usize, schedule: &[usize]) -> Result<f64> {
    let model = CommModel {
        n_halo: schedule.to_vec(),
        ..CommModel::cg()
    };
    model.ratio(solver, n)
}

/// Predicted communication time relative to computation time.
pub fn predicted_overhead(r: f64, bw_mem: f64, bw_mpi: f64) -> Result<f64> {
    if !(bw_mem > 0.0 && bw_mpi > 0.0) {
        return Err(Error::Parameter(format!(
            "bandwidths must be positive, got {bw_mem} and {bw_mpi}"
        )));
    }
    Ok(r * bw_mem / bw_mpi)
}

/// Local sizes of the ratio table.
pub const RATIO_TABLE_SIZES: [usize; 4] = [128, 256, 512, 768];

/// Reference `R x 10^4` values at [`RATIO_TABLE_SIZES`]:
/// CG, multigrid, multigrid fine level only.
pub const RATIO_TABLE_REFERENCE: [(&str, [f64; 4]); 3] = [
    ("cg", [20.8, 10.4, 5.2, 3.5]),
    ("mg", [80.5, 40.2, 20.1, 13.4]),
    ("mg_fine", [54.3, 27.2, 13.6, 9.1]),
];

/// One row of the ratio table, values are `R x 10^4`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub solver: &'static str,
    pub values: Vec<f64>,
}

/// Ratio table for CG, five-level multigrid and its finest level.
/// `n_halo` replaces every per-level exchange count when given.
pub fn ratio_table(sizes: &[usize], levels: usize, n_halo: Option<usize>) -> Result<Vec<RatioRow>> {
    let adjust = |m: CommModel| match n_halo {
        Some(n) => m.with_uniform_halo(n),
        None => m,
    };
    let cg = adjust(CommModel::cg());
    let mg = adjust(CommModel::multigrid(levels));
    let mut rows = vec![
        RatioRow { solver: "cg", values: vec![] },
        RatioRow { solver: "mg", values: vec![] },
        RatioRow { solver: "mg_fine", values: vec![] },
    ];
    for &n in sizes {
        rows[0].values.push(cg.ratio(SolverKind::Cg, n)? * 1e4);
        rows[1].values.push(mg.ratio(SolverKind::Multigrid, n)? * 1e4);
        rows[2].values.push(mg.fine_level_ratio(n) * 1e4);
    }
    Ok(rows)
}

/// Ratio rows as CSV: `solver` followed by one column per local size.
pub fn ratio_table_csv(sizes: &[usize], rows: &[RatioRow]) -> String {
    let mut out = String::from("solver");
    for n in sizes {
        out.push_str(&format!(",{n}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(r.solver);
        for v in &r.values {
            out.push_str(&format!(",{v:.1}"));
        }
        out.push('\n');
    }
    out
}

/// Whether a counted kernel ran during setup or inside the iteration loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Setup,
    Iteration,
}

/// Cells processed per kernel, level and phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfCounters {
    cells: BTreeMap<(Phase, Kernel, usize), u64>,
}

impl PerfCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: Phase, kernel: Kernel, level: usize, cells: usize) {
        *self.cells.entry((phase, kernel, level)).or_default() += cells as u64;
    }

    pub fn merge(&mut self, other: &PerfCounters) {
        for (key, n) in &other.cells {
            *self.cells.entry(*key).or_default() += n;
        }
    }

    pub fn reset(&mut self) {
        self.cells.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells processed by `kernel` in `phase`, all levels.
    pub fn cells(&self, phase: Phase, kernel: Kernel) -> u64 {
        self.cells
            .iter()
            .filter(|((p, k, _), _)| *p == phase && *k == kernel)
            .map(|(_, n)| n)
            .sum()
    }

    /// Total operations and references charged in `phase`.
    pub fn totals(&self, phase: Phase) -> KernelCost {
        self.cells
            .iter()
            .filter(|((p, _, _), _)| *p == phase)
            .fold(KernelCost::ZERO, |acc, ((_, k, _), n)| acc + k.cost() * *n as f64)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Phase, Kernel, usize, u64)> + '_ {
        self.cells.iter().map(|(&(p, k, l), &n)| (p, k, l, n))
    }
}

/// Measured against analytic cost per fine cell and iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterReport {
    pub measured: KernelCost,
    pub expected: KernelCost,
    /// `measured.flops / expected.flops - 1`.
    pub relative_flops_error: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

impl fmt::Display for CounterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "measured {:.3} flops/cell/iter against {:.3} ({:+.2}%, tolerance {:.2}%): {}",
            self.measured.flops,
            self.expected.flops,
            100.0 * self.relative_flops_error,
            100.0 * self.tolerance,
            if self.within_tolerance { "ok" } else { "mismatch" }
        )
    }
}

/// Compares the iteration-phase counters of a run of `iterations`
/// iterations on `fine_cells` cells with `table`.
pub fn validate_counters(
    counters: &PerfCounters,
    table: &CostTable,
    iterations: usize,
    fine_cells: usize,
    tolerance: f64,
) -> CounterReport {
    let measured = if iterations == 0 || fine_cells == 0 {
        KernelCost::ZERO
    } else {
        counters.totals(Phase::Iteration) * (1.0 / (iterations as f64 * fine_cells as f64))
    };
    let expected = table.total;
    let relative_flops_error = if expected.flops == 0.0 {
        0.0
    } else {
        measured.flops / expected.flops - 1.0
    };
    CounterReport {
        measured,
        expected,
        relative_flops_error,
        tolerance,
        within_tolerance: relative_flops_error.abs() <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cg_total_is_exact() {
        let t = cost_table(SolverKind::Cg, 1).unwrap();
        assert_eq!(t.total, KernelCost::new(54.0, 24.0, 15.0));
    }

    #[test]
    fn coarsest_only_hierarchy() {
        let t = cost_table(SolverKind::Multigrid, 1).unwrap();
        assert_eq!(t.total, KernelCost::new(54.0, 29.0, 14.0));
    }

    #[test]
    fn five_level_aggregate() {
        let t = cost_table(SolverKind::Multigrid, 5).unwrap();
        assert!(close(t.total.flops, 149.4, 0.2e-2 * 149.4));
        assert!(close(t.total.mem, 67.2, 0.2e-2 * 67.2));
        assert!(close(t.total.mem_cached, 29.6, 0.06));
        assert_eq!(t.levels[4].cost, KernelCost::new(122.0, 53.0, 23.0));
        assert_eq!(t.levels[2].cost, KernelCost::new(83.0, 43.0, 20.0));
        let sum = cost_table_with(SolverKind::Multigrid, 5, 2, FineComposition::KernelSum).unwrap();
        assert_eq!(sum.levels[4].cost, KernelCost::new(105.0, 49.0, 23.0));
        let run = cost_table_with(SolverKind::Multigrid, 5, 2, FineComposition::Executed).unwrap();
        assert_eq!(run.levels[4].cost, KernelCost::new(128.0, 58.0, 26.0));
    }

    #[test]
    fn coarse_smooth_count_adds_smooths() {
        let a = cost_table_with(SolverKind::Multigrid, 1, 2, FineComposition::Reference).unwrap();
        let b = cost_table_with(SolverKind::Multigrid, 1, 5, FineComposition::Reference).unwrap();
        assert_eq!(b.total.flops - a.total.flops, 3.0 * 37.0);
        assert!(cost_table_with(SolverKind::Multigrid, 0, 2, FineComposition::Reference).is_err());
    }

    #[test]
    fn ratio_reference_values() {
        let rows = ratio_table(&RATIO_TABLE_SIZES, 5, None).unwrap();
        for (row, (name, want)) in rows.iter().zip(RATIO_TABLE_REFERENCE) {
            assert_eq!(row.solver, name);
            for (got, want) in row.values.iter().zip(want) {
                assert!(close(*got, want, 0.1), "{name}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ratio_scaling_and_byte_size_invariance() {
        let r1 = ratio_r(SolverKind::Cg, 128, &[1]).unwrap();
        let r2 = ratio_r(SolverKind::Cg, 256, &[1]).unwrap();
        assert!(close(r1, 2.0 * r2, 1e-18));
        let m8 = CommModel::multigrid(5);
        let m4 = CommModel {
            elem_bytes: 4,
            ..m8.clone()
        };
        let a = m8.ratio(SolverKind::Multigrid, 256).unwrap();
        let b = m4.ratio(SolverKind::Multigrid, 256).unwrap();
        assert!(close(a, b, 1e-18));
        let zero = ratio_table(&[128], 5, Some(0)).unwrap();
        assert!(zero.iter().all(|r| r.values[0] == 0.0));
    }

    #[test]
    fn overhead_examples() {
        assert!(close(predicted_overhead(5.2e-4, 100.0, 1.0).unwrap(), 0.052, 1e-12));
        assert_eq!(predicted_overhead(3e-3, 7.0, 7.0).unwrap(), 3e-3);
        let mg = ratio_r(SolverKind::Multigrid, 512, &[2, 4, 4, 4, 4]).unwrap();
        assert!(close(predicted_overhead(mg, 100.0, 1.0).unwrap(), 0.20, 0.01));
        assert!(predicted_overhead(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn counters_accumulate_and_validate() {
        let mut c = PerfCounters::new();
        let cells = 32 * 32 * 16;
        for _ in 0..3 {
            c.record(Phase::Iteration, Kernel::FusedSpmv, 0, cells);
            c.record(Phase::Iteration, Kernel::FusedTridiag, 0, cells);
        }
        c.record(Phase::Setup, Kernel::FusedTridiag, 0, cells);
        let t = cost_table(SolverKind::Cg, 1).unwrap();
        let report = validate_counters(&c, &t, 3, cells, 0.0);
        assert_eq!(report.measured.flops, 54.0);
        assert!(report.within_tolerance);
        let empty = validate_counters(&PerfCounters::new(), &t, 0, cells, 0.0);
        assert_eq!(empty.measured, KernelCost::ZERO);
        let mut d = PerfCounters::new();
        d.merge(&c);
        d.merge(&c);
        assert_eq!(d.cells(Phase::Iteration, Kernel::FusedSpmv), 6 * cells as u64);
        d.reset();
        assert!(d.is_empty());
    }

    #[test]
    fn csv_shapes() {
        let t = cost_table(SolverKind::Multigrid, 2).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("kernel,level,flops,mem,mem_cached\n"));
        assert_eq!(csv.lines().last(), Some("total,all,135.5,60.25,26.5"));
        let rows = ratio_table(&[128], 5, None).unwrap();
        let r = ratio_table_csv(&[128], &rows);
        assert_eq!(r.lines().next(), Some("solver,128"));
        assert_eq!(r.lines().nth(1), Some("cg,20.8"));
    }
}
