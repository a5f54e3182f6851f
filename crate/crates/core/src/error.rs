//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular: {0}")]
    SingularMatrix(String),
    #[error("zero pivot during incomplete factorization (row {row}); a diagonal shift may help")]
    BreakdownZeroPivot { row: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("direction is not trace-preserving: |<1|L_j| = {0:.3e}")]
    NonTracePreservingDirection(f64),
    #[error("perturbative corrections diverge: |rho^(n)| exceeded {0:.1e} x |rho^(0)|")]
    DivergingCorrections(f64),
    #[error("reduced system is singular")]
    ReducedSystemSingular,
    #[error("missing delta-direction correction grid: {0}")]
    MissingDeltaGrid(String),
    #[error("grid point {index:?} failed to converge as its own base point: {detail}")]
    NonConvergentPoint { index: Vec<usize>, detail: String },
    #[error("iterative solve did not converge after fallback (residual {0:.3e})")]
    NonConvergent(f64),
    #[error("symmetry superoperator does not commute (norm {0:.3e})")]
    NonCommutingSymmetry(f64),
    #[error("symmetry sector does not support a steady state (trace functional annihilated)")]
    SectorMissingSteadyState,
    #[error("Fock truncation too small: top-level population {0:.3e}")]
    TruncationTooSmall(f64),
    #[error("lattice too large: {spins} spins exceeds cap of {cap}")]
    LatticeTooLarge { spins: usize, cap: usize },
    #[error("closed-form series did not converge")]
    SeriesNonConvergent,
    #[error("drive amplitude is zero")]
    ZeroDrive,
    #[error("kernel of the Liouvillian is degenerate ({0} near-zero singular values)")]
    DegenerateKernel(usize),
    #[error("maximum iterations exceeded")]
    MaxIterationsExceeded,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
