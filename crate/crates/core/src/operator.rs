//! Matrix-free application of the 7-point column operator.
//!
//! Coefficients are recomputed on the fly from the vertical profiles and the
//! per-column scalars; no matrix entries are stored. Kernels traverse the
//! field plane by plane (`j` fixed) so that all columns of a plane are
//! processed in lock step over `k`, each row being a contiguous x-run.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CellCoefficients, Geometry, Side};
use crate::grid::{Field, GridShape};

/// Largest system [`StencilOperator::assemble_dense`] builds by default.
pub const DEFAULT_DENSE_CAP: usize = 65536;

/// The discrete operator on one subdomain and multigrid level.
#[derive(Debug, Clone)]
pub struct StencilOperator {
    geometry: Geometry,
    shape: GridShape,
    level: usize,
}

impl StencilOperator {
    pub fn new(geometry: Geometry, shape: GridShape, level: usize) -> Result<Self> {
        if geometry.horizontal.nx() != shape.nx()
            || geometry.horizontal.ny() != shape.ny()
            || geometry.profiles.nz() != shape.nz()
        {
            return Err(Error::Shape(format!(
                "geometry {}x{}x{} does not match grid {}x{}x{}",
                geometry.horizontal.nx(),
                geometry.horizontal.ny(),
                geometry.profiles.nz(),
                shape.nx(),
                shape.ny(),
                shape.nz()
            )));
        }
        if shape.halo() == 0 {
            return Err(Error::Shape("the stencil needs a halo of width >= 1".into()));
        }
        Ok(Self {
            geometry,
            shape,
            level,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub(crate) fn check_field(&self, f: &Field) -> Result<()> {
        f.ensure_compute_layout()?;
        if f.shape() != &self.shape {
            return Err(Error::Shape(format!(
                "field shape {:?} does not match operator shape {:?}",
                f.shape(),
                self.shape
            )));
        }
        Ok(())
    }

    /// Column coefficients of interior plane `j` (1-based).
    #[inline]
    pub(crate) fn plane_cells(&self, j: usize) -> &[CellCoefficients] {
        self.geometry.horizontal.row(j)
    }

    /// Evaluates `(A x)` on row `k` of interior plane `sj` (storage index) and
    /// hands `(i0, offset, value)` to `emit` for each interior `i0 = i - 1`.
    #[inline]
    pub(crate) fn stencil_row(
        &self,
        x: &[f64],
        sj: usize,
        k: usize,
        mut emit: impl FnMut(usize, usize, f64),
    ) {
        let s = &self.shape;
        let p = &self.geometry.profiles;
        let (row, plane) = (s.row_len(), s.plane_len());
        let cells = self.plane_cells(sj + 1 - s.ol_y());
        let base = sj * plane + k * row + s.ol_x();
        let (ak, bk, ck, dk) = (p.a[k], p.b[k], p.c[k], p.d[k]);
        let has_below = k > 0;
        let has_above = k + 1 < s.nz();
        for (i0, cell) in cells.iter().enumerate() {
            let o = base + i0;
            let mut v = (cell.area * (ak - bk - ck) - cell.alpha_cell * dk) * x[o];
            if has_below {
                v += cell.area * bk * x[o - row];
            }
            if has_above {
                v += cell.area * ck * x[o + row];
            }
            let e = &cell.alpha_edge;
            v += dk
                * (e[Side::West.index()] * x[o - 1]
                    + e[Side::East.index()] * x[o + 1]
                    + e[Side::South.index()] * x[o - plane]
                    + e[Side::North.index()] * x[o + plane]);
            emit(i0, o, v);
        }
    }

    /// `y = A x`. Halos of `x` must be current; halos of `y` are zero.
    pub fn apply(&self, x: &Field) -> Result<Field> {
        let mut y = Field::zeros(self.shape);
        self.apply_into(x, &mut y)?;
        Ok(y)
    }

    pub fn apply_into(&self, x: &Field, y: &mut Field) -> Result<()> {
        self.check_field(x)?;
        self.check_field(y)?;
        let s = self.shape;
        let xd = x.data();
        let range = s.interior_planes();
        let first = range.start / s.plane_len();
        y.data_mut()[range]
            .par_chunks_mut(s.plane_len())
            .enumerate()
            .for_each(|(n, out)| {
                let sj = first + n;
                for k in 0..s.nz() {
                    self.stencil_row(xd, sj, k, |_, o, v| out[o - sj * s.plane_len()] = v);
                }
            });
        Ok(())
    }

    /// `r = f - A u` in a single sweep.
    pub fn residual(&self, u: &Field, f: &Field) -> Result<Field> {
        let mut r = Field::zeros(self.shape);
        self.residual_into(u, f, &mut r)?;
        Ok(r)
    }

    pub fn residual_into(&self, u: &Field, f: &Field, r: &mut Field) -> Result<()> {
        self.check_field(u)?;
        self.check_field(f)?;
        self.check_field(r)?;
        let s = self.shape;
        let (ud, fd) = (u.data(), f.data());
        let range = s.interior_planes();
        let first = range.start / s.plane_len();
        r.data_mut()[range]
            .par_chunks_mut(s.plane_len())
            .enumerate()
            .for_each(|(n, out)| {
                let sj = first + n;
                let shift = sj * s.plane_len();
                for k in 0..s.nz() {
                    self.stencil_row(ud, sj, k, |_, o, v| out[o - shift] = fd[o] - v);
                }
            });
        Ok(())
    }

    /// Dense matrix of the operator in canonical interior order
    /// (`j` slowest, then `k`, then `i`). Neighbours outside the block are
    /// treated as Dirichlet ghosts and dropped.
    pub fn assemble_dense(&self) -> Result<DenseMatrix> {
        self.assemble_dense_with_cap(DEFAULT_DENSE_CAP)
    }

    pub fn assemble_dense_with_cap(&self, cap: usize) -> Result<DenseMatrix> {
        let s = self.shape;
        let (nx, ny, nz) = (s.nx(), s.ny(), s.nz());
        let n = s.interior_len();
        if n > cap {
            return Err(Error::Capacity { n, cap });
        }
        let idx = |i: usize, j: usize, k: usize| ((j - 1) * nz + k) * nx + (i - 1);
        let p = &self.geometry.profiles;
        let mut m = DenseMatrix::zeros(n);
        for j in 1..=ny {
            for k in 0..nz {
                for i in 1..=nx {
                    let row = idx(i, j, k);
                    let cell = self.geometry.horizontal.cell(i, j);
                    m.set(row, row, self.geometry.diagonal(i, j, k));
                    if k > 0 {
                        m.set(row, idx(i, j, k - 1), cell.area * p.b[k]);
                    }
                    if k + 1 < nz {
                        m.set(row, idx(i, j, k + 1), cell.area * p.c[k]);
                    }
                    let neighbours = [
                        (Side::West, i > 1, (i.wrapping_sub(1), j)),
                        (Side::East, i < nx, (i + 1, j)),
                        (Side::South, j > 1, (i, j.wrapping_sub(1))),
                        (Side::North, j < ny, (i, j + 1)),
                    ];
                    for (side, inside, (ni, nj)) in neighbours {
                        if inside {
                            m.set(row, idx(ni, nj, k), cell.alpha_edge[side.index()] * p.d[k]);
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Row-major dense square matrix used as a verification oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.n + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Number of nonzeros in `row`.
    pub fn row_nnz(&self, row: usize) -> usize {
        self.data[row * self.n..(row + 1) * self.n]
            .iter()
            .filter(|v| **v != 0.0)
            .count()
    }
}
