use thiserror::Error;

/// Errors raised by grid, solver and communication routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({i}, {j}, {k}) outside the extended range of the grid")]
    Range { i: isize, j: isize, k: isize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("zero pivot in tridiagonal solve at level k = {k}")]
    Singular { k: usize },

    #[error("CG breakdown at iteration {iteration}: {quantity} = {value:e} is not positive")]
    Breakdown {
        iteration: usize,
        quantity: &'static str,
        value: f64,
    },

    #[error("dense assembly of {n} unknowns exceeds the cap of {cap}")]
    Capacity { n: usize, cap: usize },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("halo exchange failed: {0}")]
    Exchange(String),

    #[error("rank {rank} timed out waiting for a message from rank {source_rank} (tag {tag})")]
    Timeout {
        rank: usize,
        source_rank: usize,
        tag: u32,
    },

    #[error("rank {rank} failed: {message}")]
    Rank { rank: usize, message: String },

    #[error("field dump format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
