//! Steady states of Lindblad master equations over multi-dimensional
//! parameter regions.
//!
//! The crate is organized around one workflow: build a Liouvillian
//! superoperator for an open quantum system, factorize its trace-modified
//! form once, reuse that factorization to generate perturbative correction
//! grids, and then evaluate steady states across a parameter region either
//! by standard perturbation theory, by a variational (Galerkin) solve in
//! the span of the corrections, or by preconditioned Krylov iteration with
//! subspace recycling.
//!
//! Module map:
//! - [`sparse`], [`lu`], [`ilu`], [`ortho`], [`dense`]: complex linear
//!   algebra kernels (CSR storage, Kronecker products, sparse LU with
//!   threshold partial pivoting, incomplete LU, modified Gram-Schmidt,
//!   small dense solves and SVD).
//! - [`lindblad`]: Liouvillian assembly, the trace-modified steady-state
//!   system, parameterized Liouvillian families.
//! - [`models`]: built-in models (driven-dissipative Kerr resonator,
//!   two-mode memory-buffer cat system, dissipative XYZ lattice).
//! - [`perturbation`]: correction grids via LU reuse, variational
//!   perturbation theory with residual certificates, multipoint bases.
//! - [`coverage`]: adaptive coverage of parameter grids by convergence
//!   regions, phase-diagram assembly, SVD rank analysis.
//! - [`gradfit`]: steady-state parameter estimation with analytic
//!   gradient estimators and a bounded L-BFGS loop.
//! - [`krylov`]: GMRES/BiCGSTAB, recycled Krylov spaces, symmetry-sector
//!   reduction.
//! - [`oracles`]: dense brute-force reference computations used by tests
//!   and acceptance runs only.

pub mod coverage;
pub mod dense;
pub mod error;
pub mod gradfit;
pub mod ilu;
pub mod krylov;
pub mod lindblad;
pub mod lu;
pub mod models;
pub mod oracles;
pub mod ortho;
pub mod perturbation;
pub mod sparse;
pub mod special;
pub mod symbolic;
pub mod vecops;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
