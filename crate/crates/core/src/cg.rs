//! Preconditioned conjugate gradients built from two fused grid sweeps.
//!
//! Each iteration touches the grid twice. The first sweep advances the
//! iterate with the step length of the previous iteration, updates the search
//! direction and forms `q = A p` (as `A z + beta q`, so only `z` needs fresh
//! halos). The second sweep updates the residual, applies the vertical line
//! preconditioner and accumulates both inner products needed next. One halo
//! exchange of `z` and two collective sums per iteration remain.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CompensatedSum, Field};
use crate::parallel::{Communicator, SerialComm};
use crate::perfmodel::{Kernel, PerfCounters, Phase};
use crate::smoother::BlockJacobiPreconditioner;

/// Residual history of an iterative solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceHistory {
    /// `residual_norms[0]` is the initial norm, entry `t` the norm after
    /// iteration `t`.
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_relative_residual: f64,
}

impl ConvergenceHistory {
    pub(crate) fn start(r0: f64) -> Self {
        Self {
            residual_norms: vec![r0],
            iterations: 0,
            converged: false,
            final_relative_residual: if r0 == 0.0 { 0.0 } else { 1.0 },
        }
    }

    pub(crate) fn push(&mut self, norm: f64) {
        self.residual_norms.push(norm);
        self.iterations += 1;
        self.final_relative_residual = norm / self.residual_norms[0];
    }

    pub fn relative_residuals(&self) -> Vec<f64> {
        let r0 = self.residual_norms[0];
        self.residual_norms
            .iter()
            .map(|r| if r0 == 0.0 { 0.0 } else { r / r0 })
            .collect()
    }

    /// Geometric mean of the per-iteration residual reduction.
    pub fn mean_reduction_factor(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.final_relative_residual.powf(1.0 / self.iterations as f64)
    }

    /// Largest ratio of consecutive residual norms.
    pub fn max_reduction_factor(&self) -> f64 {
        self.residual_norms
            .windows(2)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }

    /// CSV with columns `iteration,residual_norm,relative_residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual_norm,relative_residual\n");
        for (t, (r, rel)) in self
            .residual_norms
            .iter()
            .zip(self.relative_residuals())
            .enumerate()
        {
            out.push_str(&format!("{t},{r:.17e},{rel:.17e}\n"));
        }
        out
    }
}

/// Outcome of a solve: the local part of the solution, the residual history
/// and the kernel counters of this rank.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub u: Field,
    pub history: ConvergenceHistory,
    pub counters: PerfCounters,
}

/// Stopping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriteria {
    /// Stop once `||r|| / ||r_0|| < epsilon`.
    pub epsilon: f64,
    pub max_iter: usize,
}

impl StopCriteria {
    pub fn new(epsilon: f64, max_iter: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("tolerance must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon, max_iter })
    }
}

/// First fused sweep. Returns the local part of `sigma = <p, q>`.
///
/// With `alpha = Some(a)` the iterate is advanced first (`u += a p`); the
/// first iteration passes `None` and `beta = 0`. `z` must have fresh halos.
pub fn fused_spmv_kernel(
    m: &BlockJacobiPreconditioner,
    u: &mut Field,
    p: &mut Field,
    q: &mut Field,
    z: &Field,
    alpha: Option<f64>,
    beta: f64,
) -> Result<CompensatedSum> {
    let op = m.operator();
    for f in [&*u, &*p, &*q, z] {
        op.check_field(f)?;
    }
    let s = *op.shape();
    let (nx, nz, row, plane) = (s.nx(), s.nz(), s.row_len(), s.plane_len());
    let range = s.interior_planes();
    let first = range.start / plane;
    let zd = z.data();
    let partials: Vec<CompensatedSum> = u.data_mut()[range.clone()]
        .par_chunks_mut(plane)
        .zip(p.data_mut()[range.clone()].par_chunks_mut(plane))
        .zip(q.data_mut()[range].par_chunks_mut(plane))
        .enumerate()
        .map(|(n, ((uc, pc), qc))| {
            let sj = first + n;
            let mut sigma = CompensatedSum::default();
            for k in 0..nz {
                let lo = k * row + s.ol_x();
                if let Some(a) = alpha {
                    for (uv, pv) in uc[lo..lo + nx].iter_mut().zip(&pc[lo..lo + nx]) {
                        *uv += a * pv;
                    }
                }
                op.stencil_row(zd, sj, k, |i0, o, az| {
                    let l = lo + i0;
                    let pv = zd[o] + beta * pc[l];
                    let qv = az + beta * qc[l];
                    pc[l] = pv;
                    qc[l] = qv;
                    sigma.add(pv * qv);
                });
            }
            sigma
        })
        .collect();
    Ok(CompensatedSum::merge_all(&partials))
}

/// Second fused sweep: `r -= alpha q`, `z = M^-1 r`. Returns the local parts
/// of `<r, r>` and `<r, z>`.
pub fn fused_tridiag_kernel(
    m: &BlockJacobiPreconditioner,
    r: &mut Field,
    z: &mut Field,
    q: &Field,
    alpha: f64,
) -> Result<(CompensatedSum, CompensatedSum)> {
    let op = m.operator();
    for f in [&*r, &*z, q] {
        op.check_field(f)?;
    }
    let s = *op.shape();
    let (nx, nz, row, plane) = (s.nx(), s.nz(), s.row_len(), s.plane_len());
    let range = s.interior_planes();
    let first = range.start / plane;
    let qd = q.data();
    let partials: Vec<(CompensatedSum, CompensatedSum)> = r.data_mut()[range.clone()]
        .par_chunks_mut(plane)
        .zip(z.data_mut()[range].par_chunks_mut(plane))
        .enumerate()
        .map_init(
            || (vec![0.0; nx * nz], vec![0.0; nx * nz]),
            |(cp, dp), (n, (rc, zc))| {
                let sj = first + n;
                let j = sj + 1 - s.ol_y();
                let qc = &qd[sj * plane..(sj + 1) * plane];
                let mut rr = CompensatedSum::default();
                m.forward_plane(
                    j,
                    |k, dst| {
                        let lo = k * row + s.ol_x();
                        for i0 in 0..nx {
                            let v = rc[lo + i0] - alpha * qc[lo + i0];
                            rc[lo + i0] = v;
                            rr.add(v * v);
                            dst[i0] = v;
                        }
                    },
                    cp,
                    dp,
                )?;
                let mut rz = CompensatedSum::default();
                m.backward_plane(cp, dp, |k, i0, x| {
                    let l = k * row + s.ol_x() + i0;
                    zc[l] = x;
                    rz.add(rc[l] * x);
                });
                Ok((rr, rz))
            },
        )
        .collect::<Result<_>>()?;
    let (rr, rz): (Vec<_>, Vec<_>) = partials.into_iter().unzip();
    Ok((CompensatedSum::merge_all(&rr), CompensatedSum::merge_all(&rz)))
}

/// Solves `A u = f` from a zero initial guess.
///
/// Convergence is tested on the recurrence residual after every iteration.
/// Running out of iterations is not an error: the outcome then reports
/// `converged = false`. Loss of positive definiteness in either inner
/// product is reported as [`Error::Breakdown`].
pub fn cg_solve<C: Communicator>(
    m: &BlockJacobiPreconditioner,
    f: &Field,
    stop: StopCriteria,
    comm: &mut C,
) -> Result<SolveOutcome> {
    let op = m.operator();
    op.check_field(f)?;
    let shape = *op.shape();
    let cells = shape.interior_len();
    let mut counters = PerfCounters::new();
    comm.begin_iteration(0);

    let mut u = Field::zeros(shape);
    let mut r = f.clone();
    let mut z = Field::zeros(shape);
    // r = f - A 0 and z = M^-1 r, the tridiagonal sweep with alpha = 0
    let (rr, rz) = fused_tridiag_kernel(m, &mut r, &mut z, &Field::zeros(shape), 0.0)?;
    counters.record(Phase::Setup, Kernel::FusedTridiag, 0, cells);
    let sums = comm.reduce(&[rr, rz])?;
    let r0 = sums[0].sqrt();
    let mut kappa = sums[1];
    let mut history = ConvergenceHistory::start(r0);
    if r0 == 0.0 {
        history.converged = true;
        return Ok(SolveOutcome { u, history, counters });
    }
    if !(kappa > 0.0) {
        return Err(Error::Breakdown {
            iteration: 0,
            quantity: "<r, M^-1 r>",
            value: kappa,
        });
    }
    comm.exchange_halos(&mut z, false, 0)?;

    let mut p = Field::zeros(shape);
    let mut q = Field::zeros(shape);
    let mut pending: Option<f64> = None;
    let mut beta = 0.0;
    for it in 1..=stop.max_iter {
        comm.begin_iteration(it);
        let sigma_local = fused_spmv_kernel(m, &mut u, &mut p, &mut q, &z, pending, beta)?;
        counters.record(Phase::Iteration, Kernel::FusedSpmv, 0, cells);
        let sigma = comm.reduce(&[sigma_local])?[0];
        if !(sigma > 0.0) {
            return Err(Error::Breakdown {
                iteration: it,
                quantity: "<p, A p>",
                value: sigma,
            });
        }
        let alpha = kappa / sigma;
        pending = Some(alpha);

        let (rr, rz) = fused_tridiag_kernel(m, &mut r, &mut z, &q, alpha)?;
        counters.record(Phase::Iteration, Kernel::FusedTridiag, 0, cells);
        let sums = comm.reduce(&[rr, rz])?;
        comm.exchange_halos(&mut z, false, 0)?;

        history.push(sums[0].sqrt());
        if history.final_relative_residual < stop.epsilon {
            history.converged = true;
            break;
        }
        let kappa_new = sums[1];
        if !(kappa_new > 0.0) {
            return Err(Error::Breakdown {
                iteration: it,
                quantity: "<r, M^-1 r>",
                value: kappa_new,
            });
        }
        beta = kappa_new / kappa;
        kappa = kappa_new;
    }
    // the last step length has not been applied by a following sweep yet
    if let Some(alpha) = pending {
        add_scaled(&mut u, alpha, &p);
    }
    Ok(SolveOutcome { u, history, counters })
}

/// Single-domain solve.
pub fn cg_solve_serial(m: &BlockJacobiPreconditioner, f: &Field, stop: StopCriteria) -> Result<SolveOutcome> {
    cg_solve(m, f, stop, &mut SerialComm::new())
}

/// `u += alpha p` on the interior.
fn add_scaled(u: &mut Field, alpha: f64, p: &Field) {
    let s = *u.shape();
    let (nx, nz, row, plane) = (s.nx(), s.nz(), s.row_len(), s.plane_len());
    let range = s.interior_planes();
    u.data_mut()[range.clone()]
        .par_chunks_mut(plane)
        .zip(p.data()[range].par_chunks(plane))
        .for_each(|(uc, pc)| {
            for k in 0..nz {
                let lo = k * row + s.ol_x();
                for i in lo..lo + nx {
                    uc[i] += alpha * pc[i];
                }
            }
        });
}
