//! Problem parameters and stencil coefficients for the flat-box discretisation
//! of `-omega^2 (lap_2d u + lambda^2 d_zz u) + u = f` on `[0,1]^2 x [0,H]`.
//!
//! The operator of one column `T` is assembled from the vertical profile
//! vectors `a, b, c, d` (shared by all columns) and the per-column scalars
//! `|T|`, `alpha_T` and `alpha_{T,T'}`:
//!
//! ```text
//! A_T      = |T| diag(a) - alpha_T diag(d) + |T| tridiag(-(b+c), b, c)
//! A_{T,T'} = alpha_{T,T'} diag(d)
//! ```
//!
//! Horizontal boundaries are homogeneous Dirichlet (ghost value zero, the
//! boundary face coefficient stays in `alpha_T`), vertical boundaries are
//! homogeneous Neumann (`b_0 = c_{n_z-1} = 0`).

use std::sync::Arc;

use crate::error::{Error, Result};

pub const DEFAULT_NU_CFL: f64 = 8.4;
pub const DEFAULT_DEPTH: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_NZ: usize = 128;

/// Horizontal neighbour direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::West => Side::East,
            Side::East => Side::West,
            Side::South => Side::North,
            Side::North => Side::South,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::West => "west",
            Side::East => "east",
            Side::South => "south",
            Side::North => "north",
        }
    }
}

/// `omega(h) = nu_cfl * h / 2`.
pub fn omega_from_cfl(nu_cfl: f64, h: f64) -> Result<f64> {
    if !(nu_cfl > 0.0) || !(h > 0.0) {
        return Err(Error::Parameter(format!(
            "CFL number and mesh width must be positive (nu_cfl = {nu_cfl}, h = {h})"
        )));
    }
    Ok(0.5 * nu_cfl * h)
}

/// Scalar parameters of one discretisation level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemParams {
    pub nu_cfl: f64,
    /// Horizontal mesh width.
    pub h: f64,
    /// Vertical mesh width, `depth / n_z`.
    pub h_z: f64,
    /// Depth of the box relative to its horizontal extent.
    pub depth: f64,
    pub lambda: f64,
    pub omega: f64,
}

impl ProblemParams {
    pub fn from_cfl(nu_cfl: f64, h: f64, nz: usize, depth: f64, lambda: f64) -> Result<Self> {
        let omega = omega_from_cfl(nu_cfl, h)?;
        if nz == 0 || !(depth > 0.0) || !(lambda > 0.0) {
            return Err(Error::Parameter(format!(
                "need n_z >= 1, depth > 0, lambda > 0 (got {nz}, {depth}, {lambda})"
            )));
        }
        Ok(Self {
            nu_cfl,
            h,
            h_z: depth / nz as f64,
            depth,
            lambda,
            omega,
        })
    }

    /// Rediscretised parameters on a grid `factor` times coarser horizontally.
    /// `omega` and the vertical grid are unchanged.
    pub fn coarsened(&self, factor: f64) -> Self {
        let h = self.h * factor;
        Self {
            h,
            nu_cfl: 2.0 * self.omega / h,
            ..*self
        }
    }

    /// Horizontal coupling strength `omega^2 / h^2`.
    pub fn horizontal_coupling(&self) -> f64 {
        (self.omega / self.h).powi(2)
    }

    /// Vertical coupling strength `omega^2 lambda^2 / h_z^2`.
    pub fn vertical_coupling(&self) -> f64 {
        (self.omega * self.lambda / self.h_z).powi(2)
    }
}

/// `kappa ~ 1 + 8 omega^2 / h^2` for the line-relaxation preconditioned operator.
pub fn condition_estimate(params: &ProblemParams) -> f64 {
    1.0 + 8.0 * params.horizontal_coupling()
}

/// Vertical profile vectors shared by every column.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalProfiles {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl VerticalProfiles {
    pub fn flat_box(params: &ProblemParams, nz: usize) -> Self {
        let off = -params.vertical_coupling();
        let b = (0..nz).map(|k| if k == 0 { 0.0 } else { off }).collect();
        let c = (0..nz).map(|k| if k + 1 == nz { 0.0 } else { off }).collect();
        Self {
            a: vec![1.0; nz],
            b,
            c,
            d: vec![1.0; nz],
        }
    }

    pub fn nz(&self) -> usize {
        self.a.len()
    }
}

/// Per-column horizontal coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCoefficients {
    pub area: f64,
    /// `alpha_{T,T'}` indexed by [`Side::index`].
    pub alpha_edge: [f64; 4],
    /// `alpha_T`, the sum of the four edge coefficients.
    pub alpha_cell: f64,
}

impl CellCoefficients {
    pub fn from_edges(area: f64, alpha_edge: [f64; 4]) -> Self {
        Self {
            area,
            alpha_edge,
            alpha_cell: alpha_edge.iter().sum(),
        }
    }
}

/// Horizontal coefficients of an `n_x x n_y` block of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalCoefficients {
    nx: usize,
    ny: usize,
    cells: Vec<CellCoefficients>,
}

impl HorizontalCoefficients {
    pub fn from_fn(nx: usize, ny: usize, mut cell: impl FnMut(usize, usize) -> CellCoefficients) -> Self {
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 1..=ny {
            for i in 1..=nx {
                cells.push(cell(i, j));
            }
        }
        Self { nx, ny, cells }
    }

    /// Unit-area cells with `alpha_{T,T'} = -omega^2/h^2` on all four faces,
    /// including Dirichlet boundary faces.
    pub fn flat_box(params: &ProblemParams, nx: usize, ny: usize) -> Self {
        let edge = -params.horizontal_coupling();
        Self::from_fn(nx, ny, |_, _| CellCoefficients::from_edges(1.0, [edge; 4]))
    }

    /// Coefficients of column `(i, j)`, 1-based.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &CellCoefficients {
        &self.cells[(j - 1) * self.nx + (i - 1)]
    }

    /// Coefficients of all columns in row `j`, 1-based.
    #[inline]
    pub fn row(&self, j: usize) -> &[CellCoefficients] {
        &self.cells[(j - 1) * self.nx..j * self.nx]
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }
}

/// Everything needed to apply the operator on one (sub)domain and level.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub params: ProblemParams,
    pub profiles: Arc<VerticalProfiles>,
    pub horizontal: HorizontalCoefficients,
}

impl Geometry {
    /// Flat-box geometry for a block of `nx x ny` columns on a grid whose
    /// global parameters are `params`.
    pub fn flat_box_block(params: ProblemParams, nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            horizontal: HorizontalCoefficients::flat_box(&params, nx, ny),
            profiles: Arc::new(VerticalProfiles::flat_box(&params, nz)),
            params,
        }
    }

    /// Rediscretisation on the next coarser level (horizontal mesh width doubled).
    pub fn coarsened(&self) -> Result<Self> {
        let (nx, ny) = (self.horizontal.nx(), self.horizontal.ny());
        if nx % 2 != 0 || ny % 2 != 0 {
            return Err(Error::Shape(format!("cannot coarsen {nx}x{ny} columns")));
        }
        let params = self.params.coarsened(2.0);
        Ok(Self {
            horizontal: HorizontalCoefficients::flat_box(&params, nx / 2, ny / 2),
            profiles: Arc::clone(&self.profiles),
            params,
        })
    }

    /// Diagonal entry of row `(i, j, k)` of the assembled operator.
    pub fn diagonal(&self, i: usize, j: usize, k: usize) -> f64 {
        let cell = self.horizontal.cell(i, j);
        let p = &self.profiles;
        cell.area * p.a[k] - cell.alpha_cell * p.d[k] - cell.area * (p.b[k] + p.c[k])
    }
}

/// Parameters and coefficients of the flat box with `n_x_global^2` columns.
pub fn flat_box_geometry(
    n_x_global: usize,
    nz: usize,
    nu_cfl: f64,
    depth: f64,
    lambda: f64,
) -> Result<Geometry> {
    if n_x_global == 0 {
        return Err(Error::Parameter("n_x must be positive".into()));
    }
    let params = ProblemParams::from_cfl(nu_cfl, 1.0 / n_x_global as f64, nz, depth, lambda)?;
    Ok(Geometry::flat_box_block(params, n_x_global, n_x_global, nz))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_examples() {
        let h = 1.0 / 128.0;
        assert!((omega_from_cfl(8.4, h).unwrap() - 4.2 * h).abs() < 1e-16);
        assert_eq!(omega_from_cfl(2.0, 0.5).unwrap(), 0.5);
        assert!(matches!(omega_from_cfl(0.0, 0.5), Err(Error::Parameter(_))));
        assert!(omega_from_cfl(1.0, -1.0).is_err());
    }

    #[test]
    fn condition_estimate_examples() {
        let p = ProblemParams::from_cfl(8.4, 1.0 / 128.0, 128, 0.01, 1.0).unwrap();
        assert!((condition_estimate(&p) - 142.12).abs() < 1e-9);
        let p = ProblemParams::from_cfl(16.8, 1.0 / 64.0, 128, 0.01, 1.0).unwrap();
        assert!((condition_estimate(&p) - (1.0 + 8.0 * 8.4 * 8.4)).abs() < 1e-9);
        let zero = ProblemParams { omega: 0.0, ..p };
        assert_eq!(condition_estimate(&zero), 1.0);
    }

    #[test]
    fn condition_estimate_is_resolution_independent() {
        let a = ProblemParams::from_cfl(8.4, 1.0 / 32.0, 16, 0.01, 1.0).unwrap();
        let b = ProblemParams::from_cfl(8.4, 1.0 / 512.0, 16, 0.01, 1.0).unwrap();
        assert!((condition_estimate(&a) - condition_estimate(&b)).abs() < 1e-10);
        assert!((b.omega / b.h - a.omega / a.h).abs() < 1e-14);
    }

    #[test]
    fn flat_box_parameters() {
        let g = flat_box_geometry(128, 128, 8.4, 0.01, 1.0).unwrap();
        assert_eq!(g.params.h, 1.0 / 128.0);
        assert!((g.params.omega - 4.2 / 128.0).abs() < 1e-17);
        assert_eq!(g.params.h_z, 0.01 / 128.0);
    }

    #[test]
    fn interior_diagonal_matches_closed_form() {
        let g = flat_box_geometry(16, 8, 8.4, 0.01, 1.0).unwrap();
        let p = g.params;
        let closed = 1.0 + 4.0 * p.omega.powi(2) / p.h.powi(2)
            + 2.0 * p.omega.powi(2) * p.lambda.powi(2) / p.h_z.powi(2);
        let diag = g.diagonal(5, 7, 3);
        assert!((diag - closed).abs() <= closed * f64::EPSILON);
        // Neumann rows lose one vertical coupling
        let top = g.diagonal(5, 7, 7);
        assert!((top - (closed - p.vertical_coupling())).abs() <= closed * 1e-15);
    }

    #[test]
    fn vertical_part_annihilates_constants() {
        let g = flat_box_geometry(8, 6, 8.4, 0.01, 1.0).unwrap();
        let p = &g.profiles;
        assert_eq!(p.b[0], 0.0);
        assert_eq!(p.c[5], 0.0);
        for k in 0..6 {
            let row = -(p.b[k] + p.c[k]) + p.b[k] + p.c[k];
            assert_eq!(row, 0.0);
            if k > 0 && k < 5 {
                assert_eq!(p.b[k], -g.params.vertical_coupling());
            }
        }
    }

    #[test]
    fn alpha_cell_is_sum_of_edges() {
        let g = flat_box_geometry(8, 4, 8.4, 0.01, 1.0).unwrap();
        for (i, j) in [(1, 1), (4, 5), (8, 8)] {
            let c = g.horizontal.cell(i, j);
            assert_eq!(c.alpha_cell, c.alpha_edge.iter().sum::<f64>());
            assert!((c.alpha_edge[0] + g.params.horizontal_coupling()).abs() < 1e-12);
            assert_eq!(c.area, 1.0);
        }
    }

    #[test]
    fn coarsening_doubles_h_and_keeps_omega() {
        let g = flat_box_geometry(64, 4, 8.4, 0.01, 1.0).unwrap();
        let c = g.coarsened().unwrap();
        assert_eq!(c.params.h, 2.0 * g.params.h);
        assert_eq!(c.params.omega, g.params.omega);
        assert!((c.params.horizontal_coupling() * 4.0 - g.params.horizontal_coupling()).abs() < 1e-12);
        assert_eq!(c.horizontal.nx(), 32);
    }
}
