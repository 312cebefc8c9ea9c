//! Block-structured solvers for a strongly anisotropic elliptic problem on
//! thin spherical-shell-like domains: a 7-point finite-volume operator,
//! vertical line relaxation, preconditioned CG, a horizontal-coarsening
//! multigrid V-cycle, halo-exchange parallelism and an analytic cost model.

pub mod cg;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod multigrid;
pub mod operator;
pub mod parallel;
pub mod perfmodel;
pub mod smoother;

pub use cg::{cg_solve, cg_solve_serial, ConvergenceHistory, SolveOutcome, StopCriteria};
pub use error::{Error, Result};
pub use geometry::{flat_box_geometry, Geometry, ProblemParams, Side, VerticalProfiles};
pub use grid::{CompensatedSum, Field, GridShape, Layout};
pub use multigrid::{mg_solve, mg_solve_serial, MultigridConfig, MultigridHierarchy};
pub use operator::{DenseMatrix, StencilOperator};
pub use parallel::{run_ranks, Communicator, RankComm, RankTopology, SerialComm};
pub use smoother::{thomas_solve, BlockJacobiPreconditioner, SmootherWorkspace};
