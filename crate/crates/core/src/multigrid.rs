//! Tensor-product geometric multigrid.
//!
//! Only the horizontal directions are coarsened; the strong vertical coupling
//! is handled exactly by the line smoother on every level. Coarse operators
//! are rediscretised with twice the mesh width. Restriction averages the four
//! horizontal children of a coarse cell and prolongation interpolates
//! bilinearly between coarse cell centres, reflecting oddly across walls.
//!
//! Levels are numbered from the coarsest (0) upwards. On all coarse levels the
//! restriction is fused with the first smoothing step from a zero initial
//! guess, and the coarsest-level problem is treated by a fixed number of
//! smoother iterations rather than an exact solve.

use std::sync::Arc;

use rayon::prelude::*;

use crate::cg::{ConvergenceHistory, SolveOutcome, StopCriteria};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, Side};
use crate::grid::{Field, GridShape};
use crate::operator::StencilOperator;
use crate::parallel::{Communicator, RankTopology, SerialComm};
use crate::perfmodel::{Kernel, PerfCounters, Phase};
use crate::smoother::{BlockJacobiPreconditioner, SmootherWorkspace, DEFAULT_RHO_RELAX};

/// Number of levels used unless configured otherwise.
pub const DEFAULT_LEVELS: usize = 5;

/// Smoother iterations on the coarsest level that keep the iteration count
/// flat as the CFL number grows. Hierarchies with ten or more levels have a
/// coarse problem that stays well conditioned; shallower ones need more
/// work once `nu_cfl` exceeds 16.8.
pub fn coarse_smooth_schedule(levels: usize, nu_cfl: f64) -> usize {
    let (mid, high) = match levels {
        0..=6 => (30, 150),
        7..=9 => (5, 15),
        _ => (2, 2),
    };
    if nu_cfl <= 16.8 {
        2
    } else if nu_cfl <= 84.0 {
        mid
    } else {
        high
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultigridConfig {
    pub levels: usize,
    pub pre_smooth: usize,
    pub post_smooth: usize,
    /// Smoother applications on the coarsest level, the fused restriction
    /// counting as the first.
    pub coarse_smooths: usize,
    pub rho_relax: f64,
}

impl Default for MultigridConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            pre_smooth: 1,
            post_smooth: 1,
            coarse_smooths: 2,
            rho_relax: DEFAULT_RHO_RELAX,
        }
    }
}

impl MultigridConfig {
    /// Defaults with the coarse smoothing chosen by [`coarse_smooth_schedule`].
    pub fn for_cfl(levels: usize, nu_cfl: f64) -> Self {
        Self {
            levels,
            coarse_smooths: coarse_smooth_schedule(levels, nu_cfl),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Parameter("a multigrid hierarchy needs at least one level".into()));
        }
        if self.coarse_smooths == 0 {
            return Err(Error::Parameter("the coarsest level needs at least one smoother step".into()));
        }
        if self.levels > 1 && self.pre_smooth == 0 {
            return Err(Error::Parameter(
                "coarse levels start with a fused restriction and smoothing step, so pre_smooth must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Operator, smoother and work fields of one level.
#[derive(Debug)]
pub struct MultigridLevel {
    pub op: Arc<StencilOperator>,
    pub smoother: BlockJacobiPreconditioner,
    pub u: Field,
    pub f: Field,
    pub r: Field,
    ws: SmootherWorkspace,
}

impl MultigridLevel {
    fn new(geometry: Geometry, shape: GridShape, level: usize, rho: f64) -> Result<Self> {
        let op = Arc::new(StencilOperator::new(geometry, shape, level)?);
        let smoother = BlockJacobiPreconditioner::new(Arc::clone(&op), rho)?;
        let ws = SmootherWorkspace::new(&op);
        Ok(Self {
            op,
            smoother,
            u: Field::zeros(shape),
            f: Field::zeros(shape),
            r: Field::zeros(shape),
            ws,
        })
    }

    pub fn shape(&self) -> &GridShape {
        self.op.shape()
    }

    fn cells(&self) -> usize {
        self.op.shape().interior_len()
    }
}

/// All levels of a V-cycle on one subdomain, coarsest first.
#[derive(Debug)]
pub struct MultigridHierarchy {
    levels: Vec<MultigridLevel>,
    config: MultigridConfig,
}

impl MultigridHierarchy {
    /// Builds the hierarchy below the fine-level `geometry` on `shape` by
    /// repeated horizontal coarsening.
    pub fn new(geometry: Geometry, shape: GridShape, config: MultigridConfig) -> Result<Self> {
        config.validate()?;
        let factor = 1usize << (config.levels - 1);
        if !shape.nx().is_multiple_of(factor) || !shape.ny().is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "{}x{} columns cannot be coarsened {} times",
                shape.nx(),
                shape.ny(),
                config.levels - 1
            )));
        }
        let mut geometries = vec![geometry];
        let mut shapes = vec![shape];
        for _ in 1..config.levels {
            let g = geometries.last().expect("non-empty").coarsened()?;
            let s = shapes.last().expect("non-empty").coarsened()?;
            geometries.push(g);
            shapes.push(s);
        }
        let top = config.levels - 1;
        let mut levels = Vec::with_capacity(config.levels);
        for (n, (g, s)) in geometries.into_iter().zip(shapes).enumerate().rev() {
            levels.push(MultigridLevel::new(g, s, top - n, config.rho_relax)?);
        }
        Ok(Self { levels, config })
    }

    /// Hierarchy for the subdomain of `rank` in a decomposition of the flat
    /// box described by `fine` (the whole-domain fine geometry).
    pub fn for_rank(fine: &Geometry, topology: &RankTopology, config: MultigridConfig) -> Result<Self> {
        Self::new(topology.local_geometry(fine), *topology.local_shape(), config)
    }

    pub fn config(&self) -> &MultigridConfig {
        &self.config
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &MultigridLevel {
        &self.levels[l]
    }

    pub fn finest(&self) -> &MultigridLevel {
        self.levels.last().expect("at least one level")
    }

    fn finest_mut(&mut self) -> &mut MultigridLevel {
        self.levels.last_mut().expect("at least one level")
    }
}

/// Cell average of the four horizontal children of every coarse cell.
pub fn restrict(fine: &Field) -> Result<Field> {
    let mut coarse = Field::zeros(fine.shape().coarsened()?);
    restrict_into(fine, &mut coarse)?;
    Ok(coarse)
}

fn check_transfer_pair(fine: &Field, coarse: &Field) -> Result<()> {
    fine.ensure_compute_layout()?;
    coarse.ensure_compute_layout()?;
    let (fs, cs) = (fine.shape(), coarse.shape());
    if fs.nx() != 2 * cs.nx() || fs.ny() != 2 * cs.ny() || fs.nz() != cs.nz() {
        return Err(Error::Shape(format!(
            "{}x{}x{} is not the horizontal refinement of {}x{}x{}",
            fs.nx(),
            fs.ny(),
            fs.nz(),
            cs.nx(),
            cs.ny(),
            cs.nz()
        )));
    }
    Ok(())
}

/// Values of the restricted field on row `k` of coarse plane `cj` (0-based).
#[inline]
fn restricted_row(fine: &Field, cj: usize, k: usize, out: &mut [f64]) {
    let fs = fine.shape();
    let fd = fine.data();
    let s0 = fs.x_offset(fs.ol_x(), fs.ol_y() + 2 * cj, k);
    let s1 = s0 + fs.plane_len();
    for (ci, o) in out.iter_mut().enumerate() {
        let a = s0 + 2 * ci;
        let b = s1 + 2 * ci;
        *o = 0.25 * (fd[a] + fd[a + 1] + fd[b] + fd[b + 1]);
    }
}

/// [`restrict`] into an existing coarse field.
pub fn restrict_into(fine: &Field, coarse: &mut Field) -> Result<()> {
    check_transfer_pair(fine, coarse)?;
    let cs = *coarse.shape();
    let (nx, nz, row, plane) = (cs.nx(), cs.nz(), cs.row_len(), cs.plane_len());
    let range = cs.interior_planes();
    coarse.data_mut()[range]
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(cj, out)| {
            for k in 0..nz {
                let lo = k * row + cs.ol_x();
                restricted_row(fine, cj, k, &mut out[lo..lo + nx]);
            }
        });
    Ok(())
}

/// Fused restriction and zero-guess smoothing on a coarse level:
/// `f = R r_fine`, `u = rho M^-1 f`.
pub fn restrict_smooth(
    smoother: &BlockJacobiPreconditioner,
    r_fine: &Field,
    f: &mut Field,
    u: &mut Field,
) -> Result<()> {
    let op = smoother.operator();
    op.check_field(f)?;
    op.check_field(u)?;
    check_transfer_pair(r_fine, f)?;
    let cs = *op.shape();
    let (nx, nz, row, plane) = (cs.nx(), cs.nz(), cs.row_len(), cs.plane_len());
    let rho = smoother.rho_relax();
    let range = cs.interior_planes();
    f.data_mut()[range.clone()]
        .par_chunks_mut(plane)
        .zip(u.data_mut()[range].par_chunks_mut(plane))
        .enumerate()
        .try_for_each_init(
            || (vec![0.0; nx * nz], vec![0.0; nx * nz]),
            |(cp, dp), (cj, (fc, uc))| {
                smoother.forward_plane(
                    cj + 1,
                    |k, dst| {
                        let lo = k * row + cs.ol_x();
                        restricted_row(r_fine, cj, k, dst);
                        fc[lo..lo + nx].copy_from_slice(dst);
                    },
                    cp,
                    dp,
                )?;
                smoother.backward_plane(cp, dp, |k, i0, x| uc[k * row + cs.ol_x() + i0] = rho * x);
                Ok(())
            },
        )
}

/// Adds the bilinear interpolation of `coarse` to `fine`.
///
/// Each fine cell combines its parent coarse cell (weight 3/4 per direction)
/// with the adjacent coarse cell on its side (1/4), so interior cells use the
/// weights 9/16, 3/16, 3/16 and 1/16. `coarse` needs fresh halos including
/// corners across rank faces. On the faces flagged in `boundary` (indexed by
/// [`Side::index`]) the halo is not read; the ghost value there is the odd
/// reflection of the adjacent coarse cell, so the correction vanishes on the
/// wall.
pub fn prolongate_add(coarse: &Field, fine: &mut Field, boundary: [bool; 4]) -> Result<()> {
    check_transfer_pair(fine, coarse)?;
    let (cs, fs) = (*coarse.shape(), *fine.shape());
    let (cnx, cny, nz, frow, fplane) = (cs.nx(), cs.ny(), fs.nz(), fs.row_len(), fs.plane_len());
    let west = boundary[Side::West.index()];
    let east = boundary[Side::East.index()];
    let south = boundary[Side::South.index()];
    let north = boundary[Side::North.index()];
    let cd = coarse.data();
    let range = fs.interior_planes();
    fine.data_mut()[range]
        .par_chunks_mut(fplane)
        .enumerate()
        .for_each(|(j0, out)| {
            let cj = j0 / 2;
            let sj0 = cs.ol_y() + cj;
            let (sj1, s1) = match j0 % 2 {
                0 if cj == 0 && south => (sj0, -1.0),
                0 => (sj0 - 1, 1.0),
                _ if cj + 1 == cny && north => (sj0, -1.0),
                _ => (sj0 + 1, 1.0),
            };
            for k in 0..nz {
                let c0 = cs.x_offset(0, sj0, k);
                let c1 = cs.x_offset(0, sj1, k);
                let lo = k * frow + fs.ol_x();
                let col = |si: usize| 0.75 * cd[c0 + si] + 0.25 * s1 * cd[c1 + si];
                for ci in 0..cnx {
                    let si = cs.ol_x() + ci;
                    let near = col(si);
                    let w = if ci == 0 && west { -near } else { col(si - 1) };
                    let e = if ci + 1 == cnx && east { -near } else { col(si + 1) };
                    out[lo + 2 * ci] += 0.75 * near + 0.25 * w;
                    out[lo + 2 * ci + 1] += 0.75 * near + 0.25 * e;
                }
            }
        });
    Ok(())
}

/// One V-cycle on `hierarchy`. On entry the finest `u` and `f` are set and
/// `u` has fresh halos; on exit the finest `u` is updated with fresh halos.
pub fn vcycle<C: Communicator>(
    hierarchy: &mut MultigridHierarchy,
    comm: &mut C,
    counters: &mut PerfCounters,
) -> Result<()> {
    let top = hierarchy.levels.len() - 1;
    let config = hierarchy.config;
    cycle(&mut hierarchy.levels, None, top, &config, comm, counters)
}

/// Works on the last level of `levels`. Coarse levels receive the residual
/// of the next finer level and start with the fused restriction.
fn cycle<C: Communicator>(
    levels: &mut [MultigridLevel],
    r_fine: Option<&Field>,
    top: usize,
    config: &MultigridConfig,
    comm: &mut C,
    counters: &mut PerfCounters,
) -> Result<()> {
    let l = levels.len() - 1;
    let (below, current) = levels.split_at_mut(l);
    let current = &mut current[0];
    let cells = current.cells();

    // every write to u is followed by an exchange; the last one on a coarse
    // level also fills the corners read by the bilinear prolongation
    let exchanges = if l == 0 {
        config.coarse_smooths
    } else {
        config.pre_smooth + 1 + config.post_smooth
    };
    let mut done = 0;
    let mut exchange = |u: &mut Field, comm: &mut C| -> Result<()> {
        done += 1;
        comm.exchange_halos(u, l < top && done == exchanges, l)
    };

    let steps = if l == 0 { config.coarse_smooths } else { config.pre_smooth };
    for step in 0..steps {
        match r_fine {
            Some(r) if step == 0 => {
                restrict_smooth(&current.smoother, r, &mut current.f, &mut current.u)?;
                counters.record(Phase::Iteration, Kernel::RestrictSmooth, l, cells);
            }
            _ => {
                current.smoother.smooth_in_place(&mut current.u, &current.f, &mut current.ws)?;
                counters.record(Phase::Iteration, Kernel::Smooth, l, cells);
            }
        }
        exchange(&mut current.u, comm)?;
    }
    if l == 0 {
        return Ok(());
    }

    current.op.residual_into(&current.u, &current.f, &mut current.r)?;
    counters.record(Phase::Iteration, Kernel::Residual, l, cells);

    cycle(below, Some(&current.r), top, config, comm, counters)?;

    prolongate_add(&below[l - 1].u, &mut current.u, comm.boundary())?;
    counters.record(Phase::Iteration, Kernel::Prolongate, l, cells);
    exchange(&mut current.u, comm)?;

    for _ in 0..config.post_smooth {
        current.smoother.smooth_in_place(&mut current.u, &current.f, &mut current.ws)?;
        counters.record(Phase::Iteration, Kernel::Smooth, l, cells);
        exchange(&mut current.u, comm)?;
    }
    Ok(())
}

/// Solves `A u = f` on the finest level from a zero initial guess by
/// repeated V-cycles, testing the true fine-level residual after each.
pub fn mg_solve<C: Communicator>(
    hierarchy: &mut MultigridHierarchy,
    f: &Field,
    stop: StopCriteria,
    comm: &mut C,
) -> Result<SolveOutcome> {
    let top = hierarchy.levels.len() - 1;
    let mut counters = PerfCounters::new();
    comm.begin_iteration(0);
    {
        let fine = hierarchy.finest_mut();
        fine.op.check_field(f)?;
        fine.f.copy_from(f)?;
        fine.u.clear();
        fine.r.copy_from(f)?;
    }
    let cells = hierarchy.finest().cells();
    let local = hierarchy.finest().r.dot_sum(&hierarchy.finest().r)?;
    counters.record(Phase::Setup, Kernel::ResidualNorm, top, cells);
    let r0 = comm.reduce(&[local])?[0].sqrt();
    let mut history = ConvergenceHistory::start(r0);
    if r0 == 0.0 {
        history.converged = true;
        return Ok(SolveOutcome {
            u: hierarchy.finest().u.clone(),
            history,
            counters,
        });
    }
    for it in 1..=stop.max_iter {
        comm.begin_iteration(it);
        vcycle(hierarchy, comm, &mut counters)?;
        let fine = hierarchy.finest_mut();
        fine.op.residual_into(&fine.u, &fine.f, &mut fine.r)?;
        counters.record(Phase::Iteration, Kernel::Residual, top, cells);
        let local = fine.r.dot_sum(&fine.r)?;
        counters.record(Phase::Iteration, Kernel::ResidualNorm, top, cells);
        let norm = comm.reduce(&[local])?[0].sqrt();
        history.push(norm);
        if history.final_relative_residual < stop.epsilon {
            history.converged = true;
            break;
        }
    }
    Ok(SolveOutcome {
        u: hierarchy.finest().u.clone(),
        history,
        counters,
    })
}

/// Single-domain solve.
pub fn mg_solve_serial(hierarchy: &mut MultigridHierarchy, f: &Field, stop: StopCriteria) -> Result<SolveOutcome> {
    mg_solve(hierarchy, f, stop, &mut SerialComm::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cg::cg_solve_serial;
    use crate::geometry::flat_box_geometry;

    fn noise(shape: GridShape, seed: u64) -> Field {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Field::from_fn(shape, |_, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    fn hierarchy(n: usize, nz: usize, nu: f64, config: MultigridConfig) -> MultigridHierarchy {
        let g = flat_box_geometry(n, nz, nu, 0.01, 1.0).unwrap();
        MultigridHierarchy::new(g, GridShape::new(n, n, nz, 1).unwrap(), config).unwrap()
    }

    /// Coarse values padded by one ring of odd reflections, indexed `[j][i]`
    /// with the interior at `1..=nc`.
    fn reflected(coarse: &Field, k: usize) -> Vec<Vec<f64>> {
        let (nx, ny) = (coarse.shape().nx(), coarse.shape().ny());
        let mut ext = vec![vec![0.0; nx + 2]; ny + 2];
        for j in 1..=ny {
            for i in 1..=nx {
                ext[j][i] = coarse.get(i as isize, j as isize, k as isize).unwrap();
            }
        }
        for row in ext.iter_mut() {
            row[0] = -row[1];
            row[nx + 1] = -row[nx];
        }
        for i in 0..nx + 2 {
            ext[0][i] = -ext[1][i];
            ext[ny + 1][i] = -ext[ny][i];
        }
        ext
    }

    #[test]
    fn schedule_breakpoints() {
        assert_eq!(coarse_smooth_schedule(5, 2.1), 2);
        assert_eq!(coarse_smooth_schedule(5, 16.8), 2);
        assert_eq!(coarse_smooth_schedule(5, 33.6), 30);
        assert_eq!(coarse_smooth_schedule(6, 84.0), 30);
        assert_eq!(coarse_smooth_schedule(4, 134.4), 150);
        assert_eq!(coarse_smooth_schedule(8, 33.6), 5);
        assert_eq!(coarse_smooth_schedule(9, 100.0), 15);
        assert_eq!(coarse_smooth_schedule(10, 1000.0), 2);
    }

    #[test]
    fn config_validation() {
        let g = flat_box_geometry(16, 4, 8.4, 0.01, 1.0).unwrap();
        let s = GridShape::new(16, 16, 4, 1).unwrap();
        let bad = |c: MultigridConfig| MultigridHierarchy::new(g.clone(), s, c).is_err();
        assert!(bad(MultigridConfig { levels: 0, ..Default::default() }));
        assert!(bad(MultigridConfig { coarse_smooths: 0, ..Default::default() }));
        assert!(bad(MultigridConfig { pre_smooth: 0, ..Default::default() }));
        // 16 columns allow at most four halvings
        assert!(bad(MultigridConfig { levels: 6, ..Default::default() }));
        assert!(!bad(MultigridConfig { levels: 5, ..Default::default() }));
    }

    #[test]
    fn levels_are_rediscretised() {
        let h = hierarchy(32, 4, 8.4, MultigridConfig::default());
        assert_eq!(h.num_levels(), 5);
        let fine = h.finest().op.geometry().params;
        for l in 0..5 {
            let p = h.level(l).op.geometry().params;
            let n = 32 >> (4 - l);
            assert_eq!(h.level(l).shape().nx(), n);
            assert_eq!(h.level(l).op.level(), l);
            assert_eq!(p.omega, fine.omega);
            assert!((p.h - 1.0 / n as f64).abs() < 1e-15);
            assert_eq!(p.h_z, fine.h_z);
        }
    }

    #[test]
    fn restrict_matches_oracle() {
        let fine = noise(GridShape::new(8, 8, 2, 1).unwrap(), 3);
        let coarse = restrict(&fine).unwrap();
        assert_eq!(coarse.shape().nx(), 4);
        for k in 0..2isize {
            for cj in 1..=4isize {
                for ci in 1..=4isize {
                    let mut sum = 0.0;
                    for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        sum += fine.get(2 * ci - 1 + di, 2 * cj - 1 + dj, k).unwrap();
                    }
                    let got = coarse.get(ci, cj, k).unwrap();
                    assert!((got - sum / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn restrict_preserves_constants_and_scales_indicators() {
        let s = GridShape::new(8, 4, 3, 1).unwrap();
        let c = restrict(&Field::from_fn(s, |_, _, _| 2.5)).unwrap();
        assert!(c.interior_values().iter().all(|&v| v == 2.5));
        let spike = Field::from_fn(s, |i, j, k| if (i, j, k) == (3, 2, 1) { 1.0 } else { 0.0 });
        let c = restrict(&spike).unwrap();
        assert_eq!(c.get(2, 1, 1).unwrap(), 0.25);
        assert_eq!(c.interior_values().iter().sum::<f64>(), 0.25);
    }

    #[test]
    fn transfer_shape_errors() {
        let fine = Field::zeros(GridShape::new(8, 8, 2, 1).unwrap());
        let mut wrong = Field::zeros(GridShape::new(4, 4, 3, 1).unwrap());
        assert!(restrict_into(&fine, &mut wrong).is_err());
        let mut f2 = fine.clone();
        assert!(prolongate_add(&wrong, &mut f2, [true; 4]).is_err());
        let odd = Field::zeros(GridShape::new(5, 4, 2, 1).unwrap());
        assert!(restrict(&odd).is_err());
    }

    #[test]
    fn prolongate_matches_weight_oracle() {
        let cs = GridShape::new(4, 4, 2, 1).unwrap();
        let coarse = noise(cs, 11);
        let mut fine = Field::zeros(GridShape::new(8, 8, 2, 1).unwrap());
        prolongate_add(&coarse, &mut fine, [true; 4]).unwrap();
        for k in 0..2 {
            let ext = reflected(&coarse, k);
            for j in 1..=8usize {
                for i in 1..=8usize {
                    let (ci, cj) = (i.div_ceil(2), j.div_ceil(2));
                    let ni = if i % 2 == 1 { ci - 1 } else { ci + 1 };
                    let nj = if j % 2 == 1 { cj - 1 } else { cj + 1 };
                    let want = 9.0 / 16.0 * ext[cj][ci]
                        + 3.0 / 16.0 * (ext[cj][ni] + ext[nj][ci])
                        + 1.0 / 16.0 * ext[nj][ni];
                    let got = fine.get(i as isize, j as isize, k as isize).unwrap();
                    assert!((got - want).abs() < 1e-15, "({i},{j},{k}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn prolongate_reproduces_linear_fields_from_halos() {
        // coarse centres at x = 2ci - 1 in fine-cell units, fine centres at i - 1/2
        let cs = GridShape::new(4, 4, 1, 1).unwrap();
        let lin = |x: f64, y: f64| 1.0 + 0.5 * x - 2.0 * y;
        let mut coarse = Field::zeros(cs);
        for cj in 0..=5isize {
            for ci in 0..=5isize {
                let (x, y) = (2.0 * ci as f64 - 1.0, 2.0 * cj as f64 - 1.0);
                coarse.set(ci, cj, 0, lin(x, y)).unwrap();
            }
        }
        let mut fine = Field::zeros(GridShape::new(8, 8, 1, 1).unwrap());
        prolongate_add(&coarse, &mut fine, [false; 4]).unwrap();
        for j in 1..=8isize {
            for i in 1..=8isize {
                let want = lin(i as f64 - 0.5, j as f64 - 0.5);
                assert!((fine.get(i, j, 0).unwrap() - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn prolongate_adds_and_vanishes_towards_walls() {
        let cs = GridShape::new(2, 2, 1, 1).unwrap();
        let coarse = Field::from_fn(cs, |_, _, _| 1.0);
        let mut fine = Field::from_fn(GridShape::new(4, 4, 1, 1).unwrap(), |_, _, _| 10.0);
        prolongate_add(&coarse, &mut fine, [true; 4]).unwrap();
        // corner cells see the wall in both directions, edge-adjacent ones in one
        assert_eq!(fine.get(1, 1, 0).unwrap(), 10.25);
        assert_eq!(fine.get(2, 1, 0).unwrap(), 10.5);
        assert_eq!(fine.get(2, 2, 0).unwrap(), 11.0);
    }

    #[test]
    fn restrict_smooth_matches_unfused_steps() {
        let h = hierarchy(16, 6, 8.4, MultigridConfig { levels: 2, ..Default::default() });
        let coarse = h.level(0);
        let r_fine = noise(*h.finest().shape(), 5);
        let mut f = Field::zeros(*coarse.shape());
        let mut u = Field::zeros(*coarse.shape());
        restrict_smooth(&coarse.smoother, &r_fine, &mut f, &mut u).unwrap();
        let f_ref = restrict(&r_fine).unwrap();
        let u_ref = coarse.smoother.smooth(&Field::zeros(*coarse.shape()), &f_ref).unwrap();
        assert_eq!(f.interior_values(), f_ref.interior_values());
        let scale = u_ref.max_abs();
        for (a, b) in u.interior_values().iter().zip(u_ref.interior_values()) {
            assert!((a - b).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn single_level_cycle_is_plain_smoothing() {
        let config = MultigridConfig { levels: 1, coarse_smooths: 3, ..Default::default() };
        let mut h = hierarchy(8, 4, 8.4, config);
        let f = noise(*h.finest().shape(), 9);
        h.levels[0].f.copy_from(&f).unwrap();
        let mut comm = SerialComm::new();
        let mut counters = PerfCounters::new();
        vcycle(&mut h, &mut comm, &mut counters).unwrap();
        let s = &h.finest().smoother;
        let mut want = Field::zeros(*h.finest().shape());
        for _ in 0..3 {
            want = s.smooth(&want, &f).unwrap();
        }
        for (a, b) in h.finest().u.interior_values().iter().zip(want.interior_values()) {
            assert!((a - b).abs() <= 1e-14 * want.max_abs());
        }
        assert_eq!(comm.stats().exchanges_per_level[&0], 3);
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let mut h = hierarchy(16, 4, 8.4, MultigridConfig { levels: 3, ..Default::default() });
        let shape = *h.finest().shape();
        let u_star = noise(shape, 21);
        let f = h.finest().op.apply(&u_star).unwrap();
        let mut comm = SerialComm::new();
        {
            let fine = h.finest_mut();
            fine.f.copy_from(&f).unwrap();
            fine.u.copy_from(&u_star).unwrap();
        }
        comm.exchange_halos(&mut h.finest_mut().u, false, 2).unwrap();
        vcycle(&mut h, &mut comm, &mut PerfCounters::new()).unwrap();
        for (a, b) in h.finest().u.interior_values().iter().zip(u_star.interior_values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exchanges_and_kernels_per_cycle() {
        let config = MultigridConfig { levels: 3, coarse_smooths: 4, ..Default::default() };
        let mut h = hierarchy(16, 4, 8.4, config);
        let f = noise(*h.finest().shape(), 2);
        let mut comm = SerialComm::new();
        let out = mg_solve(&mut h, &f, StopCriteria::new(1e-30, 2).unwrap(), &mut comm).unwrap();
        assert_eq!(out.history.iterations, 2);
        let ex = &comm.stats().exchanges_per_level;
        assert_eq!((ex[&0], ex[&1], ex[&2]), (8, 6, 6));
        let it = out.counters.totals(Phase::Iteration);
        let cells = |l: usize| (16usize >> (2 - l)).pow(2) as u64 * 4;
        let count = |k: Kernel, l: usize| {
            out.counters
                .entries()
                .find(|&(p, kk, ll, _)| (p, kk, ll) == (Phase::Iteration, k, l))
                .map_or(0, |e| e.3)
        };
        assert_eq!(count(Kernel::RestrictSmooth, 0), 2 * cells(0));
        assert_eq!(count(Kernel::Smooth, 0), 6 * cells(0));
        assert_eq!(count(Kernel::RestrictSmooth, 1), 2 * cells(1));
        assert_eq!(count(Kernel::Smooth, 1), 2 * cells(1));
        assert_eq!(count(Kernel::Smooth, 2), 4 * cells(2));
        assert_eq!(count(Kernel::Residual, 2), 4 * cells(2));
        assert_eq!(count(Kernel::Prolongate, 2), 2 * cells(2));
        assert_eq!(count(Kernel::ResidualNorm, 2), 2 * cells(2));
        assert!(it.flops > 0.0);
    }

    #[test]
    fn zero_rhs_needs_no_cycles() {
        let mut h = hierarchy(16, 4, 8.4, MultigridConfig { levels: 3, ..Default::default() });
        let f = Field::zeros(*h.finest().shape());
        let out = mg_solve_serial(&mut h, &f, StopCriteria::new(1e-5, 50).unwrap()).unwrap();
        assert!(out.history.converged);
        assert_eq!(out.history.iterations, 0);
        assert_eq!(out.u.max_abs(), 0.0);
    }

    #[test]
    fn converges_fast_and_agrees_with_cg() {
        let mut h = hierarchy(32, 8, 8.4, MultigridConfig::default());
        let shape = *h.finest().shape();
        let f = noise(shape, 17);
        let mg = mg_solve_serial(&mut h, &f, StopCriteria::new(1e-10, 40).unwrap()).unwrap();
        assert!(mg.history.converged);
        assert!(mg.history.iterations <= 25, "{} cycles", mg.history.iterations);
        assert!(mg.history.max_reduction_factor() < 0.6);
        let op = Arc::clone(&h.finest().op);
        let pre = BlockJacobiPreconditioner::new(op, 1.0).unwrap();
        let cg = cg_solve_serial(&pre, &f, StopCriteria::new(1e-10, 500).unwrap()).unwrap();
        let scale = cg.u.max_abs();
        for (a, b) in mg.u.interior_values().iter().zip(cg.u.interior_values()) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
    }
}
