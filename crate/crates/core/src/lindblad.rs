//! Liouvillian superoperators for Lindblad master equations.
//!
//! Densities are vectorized by column stacking: entry `rho_{ij}` of a
//! `d x d` density matrix sits at index `i + d*j`. Under this convention
//! `vec(A rho B) = (B^T (x) A) vec(rho)`, so the generator
//!
//! `d rho/dt = -i [H, rho] + sum_mu kappa_mu D[J_mu] rho`
//!
//! becomes the sparse matrix
//!
//! `L = -i (I (x) H - H^T (x) I)
//!      + sum_mu kappa_mu [ conj(J) (x) J
//!                          - 1/2 I (x) (J^dag J)
//!                          - 1/2 (J^dag J)^T (x) I ]`.
//!
//! Trace preservation shows up as `<1| L = 0`, where `<1|` is the
//! vectorized identity; the steady-state equation `L rho = 0` is made
//! nonsingular by pinning the trace with a rank-1 modification.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lu::{lu_factor, LUFactorization};
use crate::sparse::SparseMatrix;
use crate::vecops;
use crate::C64;

/// A Hamiltonian plus weighted jump operators on a truncated Hilbert space.
#[derive(Debug, Clone)]
pub struct LindbladModel {
    hilbert_dim: usize,
    hamiltonian: SparseMatrix,
    jumps: Vec<(SparseMatrix, f64)>,
}

impl LindbladModel {
    pub fn new(hamiltonian: SparseMatrix, jumps: Vec<(SparseMatrix, f64)>) -> Result<Self> {
        let d = hamiltonian.nrows();
        if !hamiltonian.is_square() {
            return Err(Error::DimensionMismatch("Hamiltonian must be square".into()));
        }
        let herm = hamiltonian
            .add_scaled(C64::new(1.0, 0.0), &hamiltonian.adjoint(), C64::new(-1.0, 0.0))?
            .max_abs();
        if herm > 1e-12 * hamiltonian.max_abs().max(1.0) {
            return Err(Error::InvalidParameter(format!("Hamiltonian is not Hermitian: |H - H^dag|_max = {herm:.3e}")));
        }
        for (j, rate) in &jumps {
            if !j.is_square() || j.nrows() != d {
                return Err(Error::DimensionMismatch("jump operator dimension mismatch".into()));
            }
            if *rate < 0.0 {
                return Err(Error::InvalidParameter(format!("negative jump rate {rate}")));
            }
        }
        Ok(Self { hilbert_dim: d, hamiltonian, jumps })
    }

    pub fn hilbert_dim(&self) -> usize {
        self.hilbert_dim
    }

    pub fn hamiltonian(&self) -> &SparseMatrix {
        &self.hamiltonian
    }

    pub fn jumps(&self) -> &[(SparseMatrix, f64)] {
        &self.jumps
    }
}

/// A change of generator that depends affinely on one parameter: an
/// optional Hamiltonian delta plus jump-rate deltas (which may be
/// negative, being differences of rates).
#[derive(Debug, Clone)]
pub struct DirectionDelta {
    pub hamiltonian: Option<SparseMatrix>,
    pub jump_rate_deltas: Vec<(SparseMatrix, f64)>,
}

impl DirectionDelta {
    pub fn from_hamiltonian(h: SparseMatrix) -> Self {
        Self { hamiltonian: Some(h), jump_rate_deltas: Vec::new() }
    }
}

/// Vectorized density matrix.
#[derive(Debug, Clone)]
pub struct DensityVector {
    pub data: Vec<C64>,
    pub hilbert_dim: usize,
}

impl DensityVector {
    pub fn new(data: Vec<C64>, hilbert_dim: usize) -> Result<Self> {
        if data.len() != hilbert_dim * hilbert_dim {
            return Err(Error::DimensionMismatch(format!(
                "density vector length {} vs dim {}^2",
                data.len(),
                hilbert_dim
            )));
        }
        Ok(Self { data, hilbert_dim })
    }

    pub fn from_matrix(m: &DMatrix<C64>) -> Self {
        let d = m.nrows();
        let mut data = vec![C64::new(0.0, 0.0); d * d];
        for j in 0..d {
            for i in 0..d {
                data[i + d * j] = m[(i, j)];
            }
        }
        Self { data, hilbert_dim: d }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn trace(&self) -> C64 {
        let d = self.hilbert_dim;
        (0..d).map(|i| self.data[i + d * i]).sum()
    }

    pub fn to_matrix(&self) -> DMatrix<C64> {
        let d = self.hilbert_dim;
        DMatrix::from_fn(d, d, |i, j| self.data[i + d * j])
    }

    pub fn norm(&self) -> f64 {
        vecops::nrm2(&self.data)
    }

    /// `|rho - rho^dag|_max` of the de-vectorized matrix.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.hilbert_dim;
        let mut err: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                let a = self.data[i + d * j];
                let b = self.data[j + d * i];
                err = err.max((a - b.conj()).norm());
            }
        }
        err
    }

    /// Checks trace normalization and Hermiticity within `tol`.
    pub fn is_physical(&self, tol: f64) -> bool {
        (self.trace() - C64::new(1.0, 0.0)).norm() <= tol && self.hermiticity_error() <= tol
    }
}

/// Vectorized identity `<1|` as a dense vector.
pub fn vec_identity(d: usize) -> Vec<C64> {
    let mut v = vec![C64::new(0.0, 0.0); d * d];
    for i in 0..d {
        v[i + d * i] = C64::new(1.0, 0.0);
    }
    v
}

/// Assemble the Liouvillian matrix of a model.
pub fn build_liouvillian(model: &LindbladModel) -> SparseMatrix {
    let d = model.hilbert_dim;
    let eye = SparseMatrix::identity(d);
    let h = &model.hamiltonian;
    let minus_i = C64::new(0.0, -1.0);
    let mut l = eye
        .kron(h)
        .add_scaled(minus_i, &h.transpose().kron(&eye), -minus_i)
        .expect("dimension-consistent by construction");
    for (j, rate) in &model.jumps {
        l = add_dissipator(&l, j, *rate, d);
    }
    l
}

fn add_dissipator(l: &SparseMatrix, j: &SparseMatrix, rate: f64, d: usize) -> SparseMatrix {
    if rate == 0.0 {
        return l.clone();
    }
    let eye = SparseMatrix::identity(d);
    let jdj = j.adjoint().matmul(j).expect("square");
    let gain = j.conjugate().kron(j);
    let loss = eye
        .kron(&jdj)
        .add_scaled(C64::new(0.5, 0.0), &jdj.transpose().kron(&eye), C64::new(0.5, 0.0))
        .expect("square");
    let diss = gain.add_scaled(C64::new(rate, 0.0), &loss, C64::new(-rate, 0.0)).expect("square");
    l.add_scaled(C64::new(1.0, 0.0), &diss, C64::new(1.0, 0.0)).expect("square")
}

/// Superoperator of a direction delta (affine derivative of the generator).
pub fn build_direction(delta: &DirectionDelta, d: usize) -> Result<SparseMatrix> {
    let n = d * d;
    let mut l = SparseMatrix::zeros(n, n);
    if let Some(h) = &delta.hamiltonian {
        if h.nrows() != d {
            return Err(Error::DimensionMismatch("direction Hamiltonian dimension".into()));
        }
        let eye = SparseMatrix::identity(d);
        let minus_i = C64::new(0.0, -1.0);
        l = eye.kron(h).add_scaled(minus_i, &h.transpose().kron(&eye), -minus_i)?;
    }
    for (j, rate_delta) in &delta.jump_rate_deltas {
        if *rate_delta == 0.0 {
            continue;
        }
        let eye = SparseMatrix::identity(d);
        let jdj = j.adjoint().matmul(j)?;
        let gain = j.conjugate().kron(j);
        let loss = eye
            .kron(&jdj)
            .add_scaled(C64::new(0.5, 0.0), &jdj.transpose().kron(&eye), C64::new(0.5, 0.0))?;
        let diss = gain.add_scaled(C64::new(*rate_delta, 0.0), &loss, C64::new(-rate_delta, 0.0))?;
        l = l.add_scaled(C64::new(1.0, 0.0), &diss, C64::new(1.0, 0.0))?;
    }
    Ok(l)
}

/// How far `<1| L` is from zero (infinity norm of the row-sum functional).
pub fn trace_preservation_defect(l: &SparseMatrix) -> f64 {
    let d = (l.nrows() as f64).sqrt().round() as usize;
    let one = vec_identity(d);
    vecops::max_abs(&l.transpose_matvec(&one))
}

/// Base Liouvillian plus direction superoperators:
/// `L(eps) = L0 + sum_j eps_j L_j`, anchored at `base_point`.
#[derive(Debug, Clone)]
pub struct ParameterizedLiouvillian {
    base: SparseMatrix,
    directions: Vec<SparseMatrix>,
    base_point: Vec<f64>,
}

impl ParameterizedLiouvillian {
    pub fn new(base: SparseMatrix, directions: Vec<SparseMatrix>, base_point: Vec<f64>) -> Result<Self> {
        let n = base.nrows();
        if !base.is_square() {
            return Err(Error::DimensionMismatch("Liouvillian must be square".into()));
        }
        if directions.len() != base_point.len() {
            return Err(Error::DimensionMismatch("one base coordinate per direction".into()));
        }
        let defect = trace_preservation_defect(&base);
        if defect > 1e-10 * base.max_abs().max(1.0) {
            return Err(Error::NonTracePreservingDirection(defect));
        }
        for dir in &directions {
            if dir.nrows() != n || !dir.is_square() {
                return Err(Error::DimensionMismatch("direction dimension mismatch".into()));
            }
            let defect = trace_preservation_defect(dir);
            if defect > 1e-10 * dir.max_abs().max(1.0) {
                return Err(Error::NonTracePreservingDirection(defect));
            }
        }
        Ok(Self { base, directions, base_point })
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn base(&self) -> &SparseMatrix {
        &self.base
    }

    pub fn directions(&self) -> &[SparseMatrix] {
        &self.directions
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// Assemble `L(eps)` as a matrix.
    pub fn at(&self, eps: &[f64]) -> SparseMatrix {
        assert_eq!(eps.len(), self.directions.len());
        let mut l = self.base.clone();
        for (e, dir) in eps.iter().zip(&self.directions) {
            if *e != 0.0 {
                l = l
                    .add_scaled(C64::new(1.0, 0.0), dir, C64::new(*e, 0.0))
                    .expect("dimension-consistent");
            }
        }
        l
    }

    /// `L(eps) v` without assembling the sum.
    pub fn apply(&self, eps: &[f64], v: &[C64]) -> Vec<C64> {
        assert_eq!(eps.len(), self.directions.len());
        let mut y = self.base.matvec(v);
        for (e, dir) in eps.iter().zip(&self.directions) {
            if *e != 0.0 {
                dir.matvec_acc(C64::new(*e, 0.0), v, &mut y);
            }
        }
        y
    }

    /// Residual norm `|L(eps) v|` of a candidate steady state.
    pub fn residual_norm(&self, eps: &[f64], v: &[C64]) -> f64 {
        vecops::nrm2(&self.apply(eps, v))
    }

    /// Same family re-anchored at `new_point` (absolute coordinates).
    pub fn rebase(&self, new_point: &[f64]) -> Self {
        assert_eq!(new_point.len(), self.base_point.len());
        let eps: Vec<f64> = new_point.iter().zip(&self.base_point).map(|(n, b)| n - b).collect();
        Self { base: self.at(&eps), directions: self.directions.clone(), base_point: new_point.to_vec() }
    }
}

/// Build a parameterized family from a base model and direction deltas.
pub fn parameterize(base: &LindbladModel, deltas: &[DirectionDelta], base_point: Vec<f64>) -> Result<ParameterizedLiouvillian> {
    let l0 = build_liouvillian(base);
    let dirs: Vec<SparseMatrix> = deltas
        .iter()
        .map(|d| build_direction(d, base.hilbert_dim()))
        .collect::<Result<_>>()?;
    ParameterizedLiouvillian::new(l0, dirs, base_point)
}

/// The trace-pinned steady-state system `(L + b T) x = |b>` with
/// `T |rho> = (Tr rho, 0, ..., 0)`.
#[derive(Debug, Clone)]
pub struct TraceModifiedSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<C64>,
    pub b: C64,
}

pub fn trace_modify(l: &SparseMatrix, b: C64) -> TraceModifiedSystem {
    let n = l.nrows();
    let d = (n as f64).sqrt().round() as usize;
    assert_eq!(d * d, n, "Liouvillian dimension must be a perfect square");
    let trace_row: Vec<(usize, usize, C64)> = (0..d).map(|i| (0usize, i + d * i, b)).collect();
    let t = SparseMatrix::from_triplets(n, n, &trace_row).expect("valid triplets");
    let matrix = l.add_scaled(C64::new(1.0, 0.0), &t, C64::new(1.0, 0.0)).expect("square");
    let mut rhs = vec![C64::new(0.0, 0.0); n];
    rhs[0] = b;
    TraceModifiedSystem { matrix, rhs, b }
}

/// Solve for the unique steady state by sparse LU; the factorization is
/// returned for reuse by the perturbative recursion.
pub fn steady_state_lu(system: &TraceModifiedSystem) -> Result<(DensityVector, LUFactorization)> {
    let f = lu_factor(&system.matrix)?;
    let mut x = f.solve_refined(&system.matrix, &system.rhs)?;
    let d = (x.len() as f64).sqrt().round() as usize;
    let mut rho = DensityVector::new(x.clone(), d)?;
    let tr = rho.trace();
    if tr.norm() < 1e-12 {
        return Err(Error::SingularMatrix("steady-state trace vanished".into()));
    }
    let scale = C64::new(1.0, 0.0) / tr;
    vecops::scale(scale, &mut x);
    rho = DensityVector::new(x, d)?;
    // residual of the unmodified generator: L rho = (L + bT) rho - |b>
    let mut r = system.matrix.matvec(&rho.data);
    for (ri, bi) in r.iter_mut().zip(&system.rhs) {
        *ri -= bi;
    }
    let resid = vecops::nrm2(&r);
    let scale_f = system.matrix.frobenius_norm();
    if resid > 1e-10 * scale_f {
        return Err(Error::SingularMatrix(format!(
            "steady-state residual {resid:.3e} exceeds 1e-10 x |L|_F = {:.3e}; kernel may be degenerate",
            1e-10 * scale_f
        )));
    }
    Ok((rho, f))
}

/// `Tr(O rho)` for a vectorized density matrix.
pub fn expectation(rho: &DensityVector, op: &SparseMatrix) -> Result<C64> {
    let d = rho.hilbert_dim;
    if op.nrows() != d || op.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "expectation: operator {}x{} vs Hilbert dimension {d}",
            op.nrows(),
            op.ncols()
        )));
    }
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..d {
        for (k, v) in op.row(i) {
            acc += v * rho.data[*k + d * i];
        }
    }
    Ok(acc)
}
