//! Vertical line relaxation.
//!
//! `M` is the block-diagonal part of `A`: one tridiagonal block `A_T` per
//! column. Its inverse is applied with the Thomas algorithm, vectorised over
//! all columns of a `j`-plane. The same blocks drive the CG preconditioner and
//! the relaxed block-Jacobi smoother `u <- u + rho M^-1 (f - A u)`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::operator::StencilOperator;

pub const DEFAULT_RHO_RELAX: f64 = 2.0 / 3.0;

/// Solves a single tridiagonal system with the Thomas algorithm.
///
/// `lower[k]` couples row `k` to `k - 1` (`lower[0]` is ignored), `upper[k]`
/// couples row `k` to `k + 1` (the last entry is ignored).
pub fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 || lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Shape(format!(
            "tridiagonal system needs four arrays of equal length >= 1 (got {}, {}, {}, {})",
            lower.len(),
            n,
            upper.len(),
            rhs.len()
        )));
    }
    let mut cp = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut prev_c = 0.0;
    let mut prev_d = 0.0;
    for k in 0..n {
        let l = if k == 0 { 0.0 } else { lower[k] };
        let denom = diag[k] - l * prev_c;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Singular { k });
        }
        let inv = 1.0 / denom;
        cp[k] = if k + 1 < n { upper[k] * inv } else { 0.0 };
        x[k] = (rhs[k] - l * prev_d) * inv;
        prev_c = cp[k];
        prev_d = x[k];
    }
    for k in (0..n - 1).rev() {
        x[k] -= cp[k] * x[k + 1];
    }
    Ok(x)
}

/// Scratch space for the split smoother: the modified super-diagonal and
/// right-hand side of the forward sweep, one `n_x * n_z` block per plane.
#[derive(Debug, Clone)]
pub struct SmootherWorkspace {
    cp: Vec<f64>,
    dp: Vec<f64>,
}

impl SmootherWorkspace {
    pub fn new(op: &StencilOperator) -> Self {
        let n = op.shape().interior_len();
        Self {
            cp: vec![0.0; n],
            dp: vec![0.0; n],
        }
    }
}

/// Block-Jacobi preconditioner / smoother built on the column blocks of `A`.
#[derive(Debug, Clone)]
pub struct BlockJacobiPreconditioner {
    op: Arc<StencilOperator>,
    rho_relax: f64,
}

impl BlockJacobiPreconditioner {
    pub fn new(op: Arc<StencilOperator>, rho_relax: f64) -> Result<Self> {
        if !(rho_relax > 0.0 && rho_relax < 2.0) {
            return Err(Error::Parameter(format!(
                "relaxation weight must lie in (0, 2), got {rho_relax}"
            )));
        }
        Ok(Self { op, rho_relax })
    }

    pub fn operator(&self) -> &StencilOperator {
        &self.op
    }

    pub fn rho_relax(&self) -> f64 {
        self.rho_relax
    }

    /// Forward elimination for all columns of interior plane `j`.
    ///
    /// `rhs(k, row)` must write the right-hand side of row `k` into `row`
    /// (length `n_x`) before it is eliminated; `cp`/`dp` receive the modified
    /// coefficients (`k * n_x + i0` layout).
    #[inline]
    pub(crate) fn forward_plane(
        &self,
        j: usize,
        mut rhs: impl FnMut(usize, &mut [f64]),
        cp: &mut [f64],
        dp: &mut [f64],
    ) -> Result<()> {
        let s = self.op.shape();
        let (nx, nz) = (s.nx(), s.nz());
        let p = &self.op.geometry().profiles;
        let cells = self.op.plane_cells(j);
        let mut singular = false;
        for k in 0..nz {
            let (ak, bk, ck, dk) = (p.a[k], p.b[k], p.c[k], p.d[k]);
            let (done, rest) = dp.split_at_mut(k * nx);
            let row = &mut rest[..nx];
            rhs(k, row);
            let (cdone, crest) = cp.split_at_mut(k * nx);
            let crow = &mut crest[..nx];
            let last = k + 1 == nz;
            if k == 0 {
                for (i0, cell) in cells.iter().enumerate() {
                    let diag = cell.area * (ak - bk - ck) - cell.alpha_cell * dk;
                    singular |= diag == 0.0;
                    let inv = 1.0 / diag;
                    crow[i0] = if last { 0.0 } else { cell.area * ck * inv };
                    row[i0] *= inv;
                }
            } else {
                let prev_d = &done[(k - 1) * nx..];
                let prev_c = &cdone[(k - 1) * nx..];
                for (i0, cell) in cells.iter().enumerate() {
                    let lower = cell.area * bk;
                    let diag = cell.area * (ak - bk - ck) - cell.alpha_cell * dk;
                    let denom = diag - lower * prev_c[i0];
                    singular |= denom == 0.0;
                    let inv = 1.0 / denom;
                    crow[i0] = if last { 0.0 } else { cell.area * ck * inv };
                    row[i0] = (row[i0] - lower * prev_d[i0]) * inv;
                }
            }
            if singular {
                return Err(Error::Singular { k });
            }
        }
        Ok(())
    }

    /// Back substitution; overwrites `dp` with the solution and reports each
    /// value through `emit(k, i0, x)`.
    #[inline]
    pub(crate) fn backward_plane(
        &self,
        cp: &[f64],
        dp: &mut [f64],
        mut emit: impl FnMut(usize, usize, f64),
    ) {
        let s = self.op.shape();
        let (nx, nz) = (s.nx(), s.nz());
        for i0 in 0..nx {
            emit(nz - 1, i0, dp[(nz - 1) * nx + i0]);
        }
        for k in (0..nz - 1).rev() {
            let (lo, hi) = dp.split_at_mut((k + 1) * nx);
            let row = &mut lo[k * nx..];
            let above = &hi[..nx];
            let crow = &cp[k * nx..(k + 1) * nx];
            for i0 in 0..nx {
                row[i0] -= crow[i0] * above[i0];
                emit(k, i0, row[i0]);
            }
        }
    }

    /// `z = M^-1 r`, one Thomas solve per column.
    pub fn precondition(&self, r: &Field) -> Result<Field> {
        let mut z = Field::zeros(*self.op.shape());
        self.precondition_into(r, &mut z)?;
        Ok(z)
    }

    pub fn precondition_into(&self, r: &Field, z: &mut Field) -> Result<()> {
        self.op.check_field(r)?;
        self.op.check_field(z)?;
        let s = *self.op.shape();
        let (nx, nz, row, plane) = (s.nx(), s.nz(), s.row_len(), s.plane_len());
        let rd = r.data();
        let range = s.interior_planes();
        let first = range.start / plane;
        z.data_mut()[range]
            .par_chunks_mut(plane)
            .enumerate()
            .try_for_each_init(
                || (vec![0.0; nx * nz], vec![0.0; nx * nz]),
                |(cp, dp), (n, out)| {
                    let sj = first + n;
                    let j = sj + 1 - s.ol_y();
                    self.forward_plane(
                        j,
                        |k, dst| {
                            let o = sj * plane + k * row + s.ol_x();
                            dst.copy_from_slice(&rd[o..o + nx]);
                        },
                        cp,
                        dp,
                    )?;
                    self.backward_plane(cp, dp, |k, i0, x| out[k * row + s.ol_x() + i0] = x);
                    Ok(())
                },
            )
    }

    /// One relaxed block-Jacobi step `u <- u + rho M^-1 (f - A u)`.
    ///
    /// Runs as two sweeps so that no plane overwrites `u` while a neighbouring
    /// plane still reads it: residual plus forward elimination first, then
    /// back substitution plus update.
    pub fn smooth_in_place(&self, u: &mut Field, f: &Field, ws: &mut SmootherWorkspace) -> Result<()> {
        self.smooth_forward(u, f, ws)?;
        self.smooth_backward(u, ws);
        Ok(())
    }

    /// First smoother sweep: residual rows feed the forward elimination.
    pub(crate) fn smooth_forward(&self, u: &Field, f: &Field, ws: &mut SmootherWorkspace) -> Result<()> {
        self.op.check_field(u)?;
        self.op.check_field(f)?;
        let s = *self.op.shape();
        let (nx, nz) = (s.nx(), s.nz());
        let (ud, fd) = (u.data(), f.data());
        let first = s.ol_y();
        ws.cp
            .par_chunks_mut(nx * nz)
            .zip(ws.dp.par_chunks_mut(nx * nz))
            .enumerate()
            .try_for_each(|(n, (cp, dp))| {
                let sj = first + n;
                self.forward_plane(
                    n + 1,
                    |k, dst| self.op.stencil_row(ud, sj, k, |i0, o, v| dst[i0] = fd[o] - v),
                    cp,
                    dp,
                )
            })
    }

    pub(crate) fn smooth_backward(&self, u: &mut Field, ws: &mut SmootherWorkspace) {
        let s = *self.op.shape();
        let (nx, nz, row, plane) = (s.nx(), s.nz(), s.row_len(), s.plane_len());
        let rho = self.rho_relax;
        let range = s.interior_planes();
        u.data_mut()[range]
            .par_chunks_mut(plane)
            .zip(ws.cp.par_chunks(nx * nz))
            .zip(ws.dp.par_chunks_mut(nx * nz))
            .for_each(|((out, cp), dp)| {
                self.backward_plane(cp, dp, |k, i0, x| out[k * row + s.ol_x() + i0] += rho * x);
            });
    }

    /// Allocating convenience wrapper around [`Self::smooth_in_place`].
    pub fn smooth(&self, u: &Field, f: &Field) -> Result<Field> {
        let mut out = u.clone();
        let mut ws = SmootherWorkspace::new(&self.op);
        self.smooth_in_place(&mut out, f, &mut ws)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{flat_box_geometry, Geometry, ProblemParams};
    use crate::grid::GridShape;

    fn flat(n: usize, nz: usize) -> BlockJacobiPreconditioner {
        let g = flat_box_geometry(n, nz, 8.4, 0.01, 1.0).unwrap();
        let op = StencilOperator::new(g, GridShape::new(n, n, nz, 1).unwrap(), 0).unwrap();
        BlockJacobiPreconditioner::new(Arc::new(op), DEFAULT_RHO_RELAX).unwrap()
    }

    fn pseudo_random(shape: GridShape, seed: u64) -> Field {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Field::from_fn(shape, |_, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn thomas_identity() {
        let rhs = [1.0, -2.0, 3.5, 0.25];
        let x = thomas_solve(&[0.0; 4], &[1.0; 4], &[0.0; 4], &rhs).unwrap();
        assert_eq!(x, rhs);
    }

    #[test]
    fn thomas_three_by_three() {
        // [2 -1 0; -1 2 -1; 0 -1 2] x = (1, 0, 1) has x = (1, 1, 1)
        let x = thomas_solve(&[-1.0; 3], &[2.0; 3], &[-1.0; 3], &[1.0, 0.0, 1.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
        // explicit inverse: rhs = e_1 gives the first column (3, 2, 1)/4
        let x = thomas_solve(&[-1.0; 3], &[2.0; 3], &[-1.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        for (v, e) in x.iter().zip([0.75, 0.5, 0.25]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn thomas_detects_zero_pivot() {
        let err = thomas_solve(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Singular { k: 0 }));
        assert!(thomas_solve(&[0.0], &[1.0], &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn thomas_leaves_inputs_untouched_and_handles_one_level() {
        let (l, d, u, r) = ([3.0], [4.0], [5.0], [2.0]);
        assert_eq!(thomas_solve(&l, &d, &u, &r).unwrap(), vec![0.5]);
        assert_eq!((l, d, u, r), ([3.0], [4.0], [5.0], [2.0]));
    }

    #[test]
    fn precondition_inverts_block_diagonal() {
        let m = flat(6, 5);
        let shape = *m.operator().shape();
        let z0 = pseudo_random(shape, 3);
        // r = M z0, computed directly from the column blocks
        let g = m.operator().geometry();
        let p = &g.profiles;
        let r = Field::from_fn(shape, |i, j, k| {
            let cell = g.horizontal.cell(i, j);
            let (ii, jj, kk) = (i as isize, j as isize, k as isize);
            let mut v = g.diagonal(i, j, k) * z0.get(ii, jj, kk).unwrap();
            if k > 0 {
                v += cell.area * p.b[k] * z0.get(ii, jj, kk - 1).unwrap();
            }
            if k + 1 < 5 {
                v += cell.area * p.c[k] * z0.get(ii, jj, kk + 1).unwrap();
            }
            v
        });
        let z = m.precondition(&r).unwrap();
        // the blocks have a condition number near 1e4 at this size
        for (a, b) in z.interior_values().iter().zip(z0.interior_values()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_anisotropy_reduces_to_diagonal_scaling() {
        let mut params = ProblemParams::from_cfl(8.4, 0.125, 3, 0.01, 1.0).unwrap();
        params.omega = 0.0;
        let g = Geometry::flat_box_block(params, 4, 4, 3);
        let op = StencilOperator::new(g, GridShape::new(4, 4, 3, 1).unwrap(), 0).unwrap();
        let m = BlockJacobiPreconditioner::new(Arc::new(op), 0.5).unwrap();
        let r = pseudo_random(*m.operator().shape(), 9);
        let z = m.precondition(&r).unwrap();
        assert_eq!(z.interior_values(), r.interior_values());
    }

    #[test]
    fn relaxation_weight_is_validated() {
        let m = flat(4, 2);
        let op = Arc::new(m.operator().clone());
        assert!(BlockJacobiPreconditioner::new(op.clone(), 0.0).is_err());
        assert!(BlockJacobiPreconditioner::new(op.clone(), 2.0).is_err());
        assert!(BlockJacobiPreconditioner::new(op, 1.9).is_ok());
    }

    #[test]
    fn smooth_fixed_point_and_zero() {
        let m = flat(8, 4);
        let shape = *m.operator().shape();
        let u = pseudo_random(shape, 5);
        let f = m.operator().apply(&u).unwrap();
        let out = m.smooth(&u, &f).unwrap();
        for (a, b) in out.interior_values().iter().zip(u.interior_values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Field::zeros(shape);
        assert_eq!(m.smooth(&zero, &zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn smooth_reduces_residual() {
        let m = flat(32, 16);
        let shape = *m.operator().shape();
        let f = pseudo_random(shape, 11);
        let u = pseudo_random(shape, 12);
        let before = m.operator().residual(&u, &f).unwrap().norm();
        let after = m.operator().residual(&m.smooth(&u, &f).unwrap(), &f).unwrap().norm();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn smooth_matches_explicit_update() {
        let m = flat(8, 4);
        let shape = *m.operator().shape();
        let u = pseudo_random(shape, 21);
        let f = pseudo_random(shape, 22);
        let r = m.operator().residual(&u, &f).unwrap();
        let z = m.precondition(&r).unwrap();
        let expected = Field::axpy(m.rho_relax(), &z, &u).unwrap();
        let got = m.smooth(&u, &f).unwrap();
        for (a, b) in got.interior_values().iter().zip(expected.interior_values()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }
}
