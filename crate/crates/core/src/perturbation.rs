//! Perturbative correction grids and variational perturbation theory.
//!
//! Around a base point the steady state admits an expansion whose terms
//! obey `L0 rho^(n) + sum_j L_j rho^(n - e_j) = 0`. Instead of applying a
//! pseudo-inverse, every order is obtained from the trace-modified
//! factorization already computed for the base state: solve
//! `Ltilde0 sigma = -sum_j L_j rho^(prev)` (the solution is automatically
//! traceless because `<1|` is a left eigenvector of `Ltilde0`), then remove
//! the base-state component,
//!
//! `rho^(n) = sigma - <rho0_hat | sigma> rho0_hat`,
//!
//! which reproduces the minimum-norm (pseudo-inverse) correction.
//!
//! Standard PT sums the grid with monomial weights `eps^n`. Variational PT
//! instead orthonormalizes the grid into `Q` and solves the reduced
//! Galerkin system `Q^dag Ltilde(eps) Q q = Q^dag |b>`; the returned
//! residual is always recomputed in the full space, never estimated from
//! the reduced one.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::dense::small_dense_solve;
use crate::error::{Error, Result};
use crate::lindblad::{vec_identity, DensityVector, ParameterizedLiouvillian};
use crate::lu::LUFactorization;
use crate::ortho::{orthonormalize_tracked, OrthoRecord, OrthonormalBasis};
use crate::sparse::SparseMatrix;
use crate::vecops;
use crate::C64;

/// Default residual tolerance in smooth parameter regions.
pub const TOL_SMOOTH: f64 = 1e-2;
/// Default residual tolerance near criticality (gap-closing regions).
pub const TOL_CRITICAL: f64 = 1e-7;
/// Basis deduplication drop tolerance.
pub const BASIS_DEDUP_TOL: f64 = 1e-10;
/// Correction-norm blowup factor that aborts grid construction.
pub const DIVERGENCE_CAP: f64 = 1e12;

/// Grid of perturbative corrections over one or more directions.
///
/// Index 0 is the physical base state; all higher multi-indices hold
/// corrections orthogonal to it.
#[derive(Debug, Clone)]
pub struct CorrectionGrid {
    orders: Vec<usize>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    corrections: Vec<DensityVector>,
    /// largest `|Tr sigma^(n)|` seen while building (the solver outputs are
    /// traceless by construction; this records how well that held)
    pub max_sigma_trace: f64,
    /// largest `|<rho0|rho^(n)>|` after projection
    pub max_base_overlap: f64,
    base_point: Vec<f64>,
}

impl CorrectionGrid {
    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.corrections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrections.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.corrections[0].len()
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    pub fn base_state(&self) -> &DensityVector {
        &self.corrections[0]
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        assert_eq!(multi.len(), self.shape.len());
        multi.iter().zip(&self.strides).map(|(n, s)| n * s).sum()
    }

    pub fn get(&self, multi: &[usize]) -> &DensityVector {
        &self.corrections[self.flat(multi)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DensityVector> {
        self.corrections.iter()
    }

    fn decode(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.shape.len()];
        for (k, s) in self.strides.iter().enumerate() {
            idx[k] = flat / s;
            flat %= s;
        }
        idx
    }

    /// Monomial weights `prod_j eps_j^{n_j}` in flat-index order.
    pub fn monomial_coefficients(&self, eps: &[f64]) -> Vec<C64> {
        assert_eq!(eps.len(), self.shape.len());
        (0..self.len())
            .map(|flat| {
                let idx = self.decode(flat);
                let w: f64 = idx.iter().zip(eps).map(|(n, e)| e.powi(*n as i32)).product();
                C64::new(w, 0.0)
            })
            .collect()
    }
}

fn grid_layout(orders: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let shape: Vec<usize> = orders.iter().map(|m| m + 1).collect();
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for k in (0..shape.len()).rev() {
        strides[k] = acc;
        acc *= shape[k];
    }
    (shape, strides, acc)
}

/// Multi-direction correction grid computed by LU reuse.
///
/// `f` must factorize the trace-modified base generator and `rho0` must be
/// its unit-trace steady state.
pub fn pt_corrections_grid(
    f: &LUFactorization,
    ltilde0: &SparseMatrix,
    rho0: &DensityVector,
    directions: &[SparseMatrix],
    orders: &[usize],
    base_point: &[f64],
) -> Result<CorrectionGrid> {
    if directions.is_empty() || directions.len() != orders.len() {
        return Err(Error::DimensionMismatch("one order per direction required".into()));
    }
    let n = rho0.len();
    for dir in directions {
        if dir.nrows() != n {
            return Err(Error::DimensionMismatch("direction dimension mismatch".into()));
        }
    }
    let d_hilbert = rho0.hilbert_dim;
    let (shape, strides, total) = grid_layout(orders);
    let base_norm = rho0.norm();
    let rbar: Vec<C64> = rho0.data.iter().map(|v| v / C64::new(base_norm, 0.0)).collect();

    let mut corrections: Vec<DensityVector> = Vec::with_capacity(total);
    corrections.push(rho0.clone());
    let mut max_sigma_trace: f64 = 0.0;
    let mut max_base_overlap: f64 = 0.0;

    for flat in 1..total {
        // rhs = -sum_j L_j rho^(idx - e_j)
        let mut rhs = vec![C64::new(0.0, 0.0); n];
        let mut rem = flat;
        for (k, s) in strides.iter().enumerate() {
            let nk = rem / s;
            rem %= s;
            if nk > 0 {
                let prev = &corrections[flat - s];
                directions[k].matvec_acc(C64::new(-1.0, 0.0), &prev.data, &mut rhs);
            }
        }
        let sigma = f.solve_refined(ltilde0, &rhs)?;
        let sigma_state = DensityVector::new(sigma, d_hilbert)?;
        max_sigma_trace = max_sigma_trace.max(sigma_state.trace().norm());
        // remove the nullspace (base-state) component
        let overlap = vecops::dot(&rbar, &sigma_state.data);
        let mut data = sigma_state.data;
        vecops::axpy(-overlap, &rbar, &mut data);
        let corr = DensityVector::new(data, d_hilbert)?;
        max_base_overlap = max_base_overlap.max(vecops::dot(&rho0.data, &corr.data).norm() / base_norm);
        if corr.norm() > DIVERGENCE_CAP * base_norm {
            return Err(Error::DivergingCorrections(DIVERGENCE_CAP));
        }
        corrections.push(corr);
    }
    Ok(CorrectionGrid {
        orders: orders.to_vec(),
        shape,
        strides,
        corrections,
        max_sigma_trace,
        max_base_overlap,
        base_point: base_point.to_vec(),
    })
}

/// One-dimensional recurrence (single direction).
pub fn pt_corrections_1d(
    f: &LUFactorization,
    ltilde0: &SparseMatrix,
    rho0: &DensityVector,
    l1: &SparseMatrix,
    m: usize,
    base_point: f64,
) -> Result<CorrectionGrid> {
    pt_corrections_grid(f, ltilde0, rho0, std::slice::from_ref(l1), &[m], &[base_point])
}

/// A steady-state evaluation produced by (variational) perturbation theory.
#[derive(Debug, Clone)]
pub struct VptSolution {
    /// trace-normalized state
    pub state: DensityVector,
    /// raw coefficients in the solve basis (orthonormal basis for VPT,
    /// monomial weights for standard PT); the state is
    /// `basis x coefficients / normalizer`
    pub coefficients: Vec<C64>,
    /// trace of the unnormalized combination
    pub normalizer: C64,
    /// `|L(eps) state|` recomputed in the full space
    pub residual: f64,
    pub epsilon: Vec<f64>,
    pub converged: bool,
    /// reduced system was rank-deficient (least-squares fallback used)
    pub rank_deficient: bool,
}

/// Orthonormalized correction span with precomputed reduced blocks.
#[derive(Debug, Clone)]
pub struct PerturbationBasis {
    q: OrthonormalBasis,
    l0_eff: DMatrix<C64>,
    dir_eff: Vec<DMatrix<C64>>,
    /// `Q^dag e_0`
    qe0: DVector<C64>,
    /// `<1| Q`
    trace_row: RowDVector<C64>,
    b: C64,
    base_points: Vec<Vec<f64>>,
    ortho: OrthoRecord,
    input_count: usize,
}

impl PerturbationBasis {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn basis(&self) -> &OrthonormalBasis {
        &self.q
    }

    pub fn base_points(&self) -> &[Vec<f64>] {
        &self.base_points
    }

    pub fn direction_count(&self) -> usize {
        self.dir_eff.len()
    }

    pub fn reduced_l0(&self) -> &DMatrix<C64> {
        &self.l0_eff
    }

    pub fn reduced_direction(&self, j: usize) -> &DMatrix<C64> {
        &self.dir_eff[j]
    }

    /// Assemble the reduced trace-modified generator at `eps`.
    pub fn assemble(&self, eps: &[f64]) -> DMatrix<C64> {
        assert_eq!(eps.len(), self.dir_eff.len());
        let mut m = self.l0_eff.clone();
        for (e, block) in eps.iter().zip(&self.dir_eff) {
            if *e != 0.0 {
                m += block * C64::new(*e, 0.0);
            }
        }
        // rank-1 trace term b * (Q^dag e0) (<1| Q)
        m += (&self.qe0 * &self.trace_row) * self.b;
        m
    }

    pub fn reduced_rhs(&self) -> DVector<C64> {
        &self.qe0 * self.b
    }

    /// Trace of the full-space vector represented by reduced coefficients,
    /// `<1| Q q`.
    pub fn trace_of_coefficients(&self, q: &[C64]) -> C64 {
        assert_eq!(q.len(), self.len());
        self.trace_row.iter().zip(q).map(|(t, c)| t * c).sum()
    }

    /// Express a VPT solution in the original correction-vector basis by
    /// solving the triangular relation from the orthonormalization record;
    /// least-squares when vectors were deduplicated.
    pub fn correction_coefficients(&self, solution: &VptSolution) -> Vec<C64> {
        let q = DVector::from_column_slice(&solution.coefficients);
        let svd = crate::dense::dense_svd(&self.ortho.r);
        let c = svd.pseudo_inverse_apply(&q, 1e-12);
        c.iter().copied().collect()
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }
}

/// Pool one or more correction grids into an orthonormal basis with
/// reduced blocks of `l0` and each direction.
pub fn build_basis(
    grids: &[&CorrectionGrid],
    l0: &SparseMatrix,
    directions: &[SparseMatrix],
    b: C64,
) -> Result<PerturbationBasis> {
    if grids.is_empty() {
        return Err(Error::EmptyInput("build_basis: no correction grids".into()));
    }
    let dim = grids[0].dim();
    for g in grids {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch("grids have mixed ambient dimensions".into()));
        }
    }
    let inputs: Vec<Vec<C64>> = grids.iter().flat_map(|g| g.iter().map(|c| c.data.clone())).collect();
    let (q, ortho) = orthonormalize_tracked(&inputs, BASIS_DEDUP_TOL)?;
    let base_points = grids.iter().map(|g| g.base_point().to_vec()).collect();
    let input_count = inputs.len();
    Ok(build_basis_from_orthonormal(q, ortho, l0, directions, b, base_points, input_count))
}

pub(crate) fn build_basis_from_orthonormal(
    q: OrthonormalBasis,
    ortho: OrthoRecord,
    l0: &SparseMatrix,
    directions: &[SparseMatrix],
    b: C64,
    base_points: Vec<Vec<f64>>,
    input_count: usize,
) -> PerturbationBasis {
    let dim = q.dim();
    let count = q.len();
    let reduced_block = |m: &SparseMatrix| -> DMatrix<C64> {
        let mut y = DMatrix::<C64>::zeros(dim, count);
        let mut col = vec![C64::new(0.0, 0.0); dim];
        let mut out = vec![C64::new(0.0, 0.0); dim];
        for k in 0..count {
            for (i, v) in q.matrix().column(k).iter().enumerate() {
                col[i] = *v;
            }
            m.matvec_into(&col, &mut out);
            for (i, v) in out.iter().enumerate() {
                y[(i, k)] = *v;
            }
        }
        q.matrix().ad_mul(&y)
    };
    let l0_eff = reduced_block(l0);
    let dir_eff: Vec<DMatrix<C64>> = directions.iter().map(reduced_block).collect();
    let d_hilbert = (dim as f64).sqrt().round() as usize;
    let one = vec_identity(d_hilbert);
    let qe0 = DVector::from_fn(count, |k, _| q.matrix()[(0, k)].conj());
    let trace_row = RowDVector::from_fn(count, |_, k| {
        one.iter().zip(q.matrix().column(k).iter()).map(|(o, v)| o * v).sum()
    });
    PerturbationBasis { q, l0_eff, dir_eff, qe0, trace_row, b, base_points, ortho, input_count }
}

/// Galerkin VPT solve at `eps` (relative to the basis's base point).
///
/// The reduced system is solved with a least-squares fallback on rank
/// deficiency; the convergence certificate is the full-space residual.
pub fn vpt_solve(
    basis: &PerturbationBasis,
    family: &ParameterizedLiouvillian,
    eps: &[f64],
    tol: f64,
) -> VptSolution {
    let m = basis.assemble(eps);
    let rhs = basis.reduced_rhs();
    let sol = small_dense_solve(&m, &rhs);
    let q_eff: Vec<C64> = sol.x.iter().copied().collect();
    finish_solution(basis, family, eps, tol, q_eff, sol.rank_deficient)
}

fn finish_solution(
    basis: &PerturbationBasis,
    family: &ParameterizedLiouvillian,
    eps: &[f64],
    tol: f64,
    q_eff: Vec<C64>,
    rank_deficient: bool,
) -> VptSolution {
    let d_hilbert = (basis.dim() as f64).sqrt().round() as usize;
    let normalizer: C64 = basis
        .trace_row
        .iter()
        .zip(&q_eff)
        .map(|(t, q)| t * q)
        .sum();
    if normalizer.norm() < 1e-12 || q_eff.iter().any(|v| !v.is_finite()) {
        let state = DensityVector::new(basis.q.combine(&q_eff), d_hilbert).expect("dims");
        return VptSolution {
            state,
            coefficients: q_eff,
            normalizer,
            residual: f64::INFINITY,
            epsilon: eps.to_vec(),
            converged: false,
            rank_deficient,
        };
    }
    let mut data = basis.q.combine(&q_eff);
    let inv = C64::new(1.0, 0.0) / normalizer;
    vecops::scale(inv, &mut data);
    let state = DensityVector::new(data, d_hilbert).expect("dims");
    let residual = family.residual_norm(eps, &state.data);
    VptSolution {
        state,
        coefficients: q_eff,
        normalizer,
        residual,
        epsilon: eps.to_vec(),
        converged: residual <= tol,
        rank_deficient,
    }
}

/// Reduced-space defect `|Q^dag (Ltilde(eps) Q q - |b>)|` of a solution
/// (diagnostic; vanishes for the Galerkin solve).
pub fn galerkin_defect(basis: &PerturbationBasis, eps: &[f64], solution: &VptSolution) -> f64 {
    let m = basis.assemble(eps);
    let q = DVector::from_column_slice(&solution.coefficients);
    (m * q - basis.reduced_rhs()).norm()
}

/// Standard perturbation theory: monomial weights, full-space residual.
pub fn standard_pt_eval(
    grid: &CorrectionGrid,
    family: &ParameterizedLiouvillian,
    eps: &[f64],
    tol: f64,
) -> VptSolution {
    let coeffs = grid.monomial_coefficients(eps);
    let n = grid.dim();
    let d_hilbert = grid.base_state().hilbert_dim;
    let mut sum = vec![C64::new(0.0, 0.0); n];
    for (c, corr) in coeffs.iter().zip(grid.iter()) {
        if *c != C64::new(0.0, 0.0) {
            vecops::axpy(*c, &corr.data, &mut sum);
        }
    }
    let unnorm = DensityVector::new(sum, d_hilbert).expect("dims");
    let normalizer = unnorm.trace();
    if normalizer.norm() < 1e-12 || unnorm.data.iter().any(|v| !v.is_finite()) {
        return VptSolution {
            state: unnorm,
            coefficients: coeffs,
            normalizer,
            residual: f64::INFINITY,
            epsilon: eps.to_vec(),
            converged: false,
            rank_deficient: false,
        };
    }
    let mut data = unnorm.data;
    vecops::scale(C64::new(1.0, 0.0) / normalizer, &mut data);
    let state = DensityVector::new(data, d_hilbert).expect("dims");
    let residual = family.residual_norm(eps, &state.data);
    VptSolution {
        state,
        coefficients: coeffs,
        normalizer,
        residual,
        epsilon: eps.to_vec(),
        converged: residual <= tol,
        rank_deficient: false,
    }
}

/// Exact Euclidean norm of `L(eps) rho` on the full space.
pub fn residual_norm(family: &ParameterizedLiouvillian, eps: &[f64], rho: &DensityVector) -> f64 {
    family.residual_norm(eps, &rho.data)
}

// ---------------------------------------------------------------------------
// Basis export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct BasisExport {
    pub dim: usize,
    pub b: [f64; 2],
    pub base_points: Vec<Vec<f64>>,
    pub vectors: Vec<Vec<[f64; 2]>>,
    pub l0_eff: Vec<Vec<[f64; 2]>>,
    pub dir_eff: Vec<Vec<Vec<[f64; 2]>>>,
}

fn matrix_to_rows(m: &DMatrix<C64>) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<[f64; 2]>]) -> Result<DMatrix<C64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Parse("empty matrix in basis file".into()));
    }
    let mut m = DMatrix::<C64>::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Parse("ragged matrix in basis file".into()));
        }
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = C64::new(v[0], v[1]);
        }
    }
    Ok(m)
}

impl PerturbationBasis {
    pub fn export(&self) -> BasisExport {
        let vectors = (0..self.len())
            .map(|k| self.q.column(k).iter().map(|v| [v.re, v.im]).collect())
            .collect();
        BasisExport {
            dim: self.dim(),
            b: [self.b.re, self.b.im],
            base_points: self.base_points.clone(),
            vectors,
            l0_eff: matrix_to_rows(&self.l0_eff),
            dir_eff: self.dir_eff.iter().map(matrix_to_rows).collect(),
        }
    }

    /// Rebuild from an export; reduced blocks are taken from the file, the
    /// trace and rhs projections are recomputed from the vectors.
    pub fn import(data: &BasisExport) -> Result<Self> {
        let dim = data.dim;
        let count = data.vectors.len();
        if count == 0 {
            return Err(Error::EmptyInput("basis file holds no vectors".into()));
        }
        let mut columns = DMatrix::<C64>::zeros(dim, count);
        for (k, col) in data.vectors.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::Parse("basis vector dimension mismatch".into()));
            }
            for (i, v) in col.iter().enumerate() {
                columns[(i, k)] = C64::new(v[0], v[1]);
            }
        }
        let vectors: Vec<Vec<C64>> = (0..count).map(|k| columns.column(k).iter().copied().collect()).collect();
        let (q, ortho) = orthonormalize_tracked(&vectors, BASIS_DEDUP_TOL)?;
        if q.len() != count {
            return Err(Error::Parse("imported basis vectors are not independent".into()));
        }
        let l0_eff = rows_to_matrix(&data.l0_eff)?;
        let dir_eff: Vec<DMatrix<C64>> = data.dir_eff.iter().map(|m| rows_to_matrix(m)).collect::<Result<_>>()?;
        let d_hilbert = (dim as f64).sqrt().round() as usize;
        if d_hilbert * d_hilbert != dim {
            return Err(Error::Parse("basis dimension is not a perfect square".into()));
        }
        let one = vec_identity(d_hilbert);
        let qe0 = DVector::from_fn(count, |k, _| q.matrix()[(0, k)].conj());
        let trace_row = RowDVector::from_fn(count, |_, k| {
            one.iter().zip(q.matrix().column(k).iter()).map(|(o, v)| o * v).sum()
        });
        Ok(PerturbationBasis {
            q,
            l0_eff,
            dir_eff,
            qe0,
            trace_row,
            b: C64::new(data.b[0], data.b[1]),
            base_points: data.base_points.clone(),
            ortho,
            input_count: count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{steady_state_lu, trace_modify};
    use crate::models;
    use crate::oracles;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    struct Setup {
        family: ParameterizedLiouvillian,
        ltilde: SparseMatrix,
        rho0: DensityVector,
        f: LUFactorization,
    }

    fn setup(built: &models::BuiltModel) -> Setup {
        let sys = trace_modify(built.family.base(), c(1.0, 0.0));
        let (rho0, f) = steady_state_lu(&sys).unwrap();
        Setup { family: built.family.clone(), ltilde: sys.matrix, rho0, f }
    }

    fn driven_qubit() -> models::BuiltModel {
        models::driven_two_level(0.7, 0.9, 1.3).unwrap()
    }

    fn small_kerr() -> models::BuiltModel {
        models::kerr_model(&models::KerrParams { delta: 0.0, kerr: 10.0, drive: 10.0, kappa: 1.0, n_max: 12 })
            .unwrap()
    }

    #[test]
    fn zero_direction_gives_zero_corrections() {
        let built = driven_qubit();
        let s = setup(&built);
        let zero = SparseMatrix::zeros(4, 4);
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &zero, 3, 0.0).unwrap();
        for k in 1..=3 {
            assert!(grid.get(&[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn first_correction_matches_dense_pseudo_inverse() {
        let built = driven_qubit();
        let s = setup(&built);
        let l1 = &s.family.directions()[1]; // drive direction
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, l1, 2, 0.0).unwrap();
        // oracle: rho^(1) = -pinv(L0) L1 rho^(0)
        let mut rhs = l1.matvec(&s.rho0.data);
        vecops::scale(c(-1.0, 0.0), &mut rhs);
        let want = oracles::dense_pseudo_inverse_apply(s.family.base(), &rhs).unwrap();
        let got = &grid.get(&[1]).data;
        let err = vecops::nrm2(&vecops::sub(got, &want));
        assert!(err < 1e-10, "deviation from pseudo-inverse {err:e}");
        // second order too, recursively
        let mut rhs2 = l1.matvec(got);
        vecops::scale(c(-1.0, 0.0), &mut rhs2);
        let want2 = oracles::dense_pseudo_inverse_apply(s.family.base(), &rhs2).unwrap();
        let err2 = vecops::nrm2(&vecops::sub(&grid.get(&[2]).data, &want2));
        assert!(err2 < 1e-10);
    }

    #[test]
    fn sigma_solves_are_traceless_and_corrections_orthogonal() {
        let built = small_kerr();
        let s = setup(&built);
        let l1 = &s.family.directions()[0];
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, l1, 20, 0.0).unwrap();
        assert!(grid.max_sigma_trace < 1e-10, "max |Tr sigma| = {:e}", grid.max_sigma_trace);
        assert!(grid.max_base_overlap < 1e-10, "max |<rho0|rho^(n)>| = {:e}", grid.max_base_overlap);
    }

    #[test]
    fn one_direction_grid_reduces_to_1d() {
        let built = driven_qubit();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let g1 = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 4, 0.0).unwrap();
        let g2 = pt_corrections_grid(&s.f, &s.ltilde, &s.rho0, &[l1], &[4], &[0.0]).unwrap();
        for k in 0..=4 {
            let d = vecops::nrm2(&vecops::sub(&g1.get(&[k]).data, &g2.get(&[k]).data));
            assert!(d < 1e-15);
        }
    }

    #[test]
    fn grid_cross_term_matches_dense_recursion() {
        let built = driven_qubit();
        let s = setup(&built);
        let dirs = s.family.directions().to_vec();
        let grid = pt_corrections_grid(&s.f, &s.ltilde, &s.rho0, &dirs, &[1, 1], &[0.0, 0.0]).unwrap();
        // dense oracle: rho^(1,1) = -pinv(L0) (L1 rho^(0,1) + L2 rho^(1,0))
        let p = oracles::DensePseudoInverse::new(s.family.base()).unwrap();
        let r01 = {
            let mut rhs = dirs[1].matvec(&s.rho0.data);
            vecops::scale(c(-1.0, 0.0), &mut rhs);
            p.apply(&rhs)
        };
        let r10 = {
            let mut rhs = dirs[0].matvec(&s.rho0.data);
            vecops::scale(c(-1.0, 0.0), &mut rhs);
            p.apply(&rhs)
        };
        let mut rhs = dirs[0].matvec(&r01);
        let tmp = dirs[1].matvec(&r10);
        vecops::axpy(c(1.0, 0.0), &tmp, &mut rhs);
        vecops::scale(c(-1.0, 0.0), &mut rhs);
        let want = p.apply(&rhs);
        let got = &grid.get(&[1, 1]).data;
        let err = vecops::nrm2(&vecops::sub(got, &want));
        assert!(err < 1e-10, "cross-term deviation {err:e}");
    }

    #[test]
    fn grid_order_independence() {
        let built = small_kerr();
        let s = setup(&built);
        let dirs = s.family.directions().to_vec();
        let g_ab = pt_corrections_grid(&s.f, &s.ltilde, &s.rho0, &dirs, &[2, 2], &[0.0, 0.0]).unwrap();
        let swapped = vec![dirs[1].clone(), dirs[0].clone()];
        let g_ba = pt_corrections_grid(&s.f, &s.ltilde, &s.rho0, &swapped, &[2, 2], &[0.0, 0.0]).unwrap();
        for n in 0..=2 {
            for m in 0..=2 {
                let d = vecops::nrm2(&vecops::sub(&g_ab.get(&[n, m]).data, &g_ba.get(&[m, n]).data));
                let scale = g_ab.get(&[n, m]).norm().max(1.0);
                assert!(d < 1e-9 * scale, "({n},{m}) differs by {d:e}");
            }
        }
    }

    #[test]
    fn divergence_cap_triggers() {
        let built = driven_qubit();
        let s = setup(&built);
        let huge = s.family.directions()[1].scaled(c(1e8, 0.0));
        let r = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &huge, 6, 0.0);
        assert!(matches!(r, Err(Error::DivergingCorrections(_))));
    }

    #[test]
    fn standard_pt_at_zero_is_base_state() {
        let built = driven_qubit();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 3, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let sol = standard_pt_eval(&grid, &family1, &[0.0], 1e-10);
        assert!(sol.converged);
        let d = vecops::nrm2(&vecops::sub(&sol.state.data, &s.rho0.data));
        assert!(d < 1e-14);
    }

    /// family restricted to a single direction (helper for 1d tests)
    fn one_direction_family(family: &ParameterizedLiouvillian, j: usize) -> ParameterizedLiouvillian {
        ParameterizedLiouvillian::new(
            family.base().clone(),
            vec![family.directions()[j].clone()],
            vec![family.base_point()[j]],
        )
        .unwrap()
    }

    #[test]
    fn standard_pt_order_of_accuracy() {
        // truncation error scales as eps^{M+1}: halving eps divides the
        // deviation from the dense solve by ~2^{M+1}
        let built = driven_qubit();
        let s = setup(&built);
        let m = 2usize;
        let l1 = s.family.directions()[0].clone();
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, m, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let err_at = |eps: f64| -> f64 {
            let sol = standard_pt_eval(&grid, &family1, &[eps], 1e30);
            let dense = oracles::dense_steady_state_lu(&family1.at(&[eps])).unwrap();
            vecops::nrm2(&vecops::sub(&sol.state.data, &dense.data))
        };
        let e1 = err_at(0.08);
        let e2 = err_at(0.04);
        let ratio = e1 / e2;
        let expected = 2f64.powi(m as i32 + 1);
        assert!(
            ratio > 0.5 * expected && ratio < 2.0 * expected,
            "order-of-accuracy ratio {ratio} vs expected {expected}"
        );
    }

    #[test]
    fn vpt_at_zero_matches_base_state() {
        let built = small_kerr();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 8, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let basis = build_basis(&[&grid], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        let sol = vpt_solve(&basis, &family1, &[0.0], 1e-10);
        assert!(sol.converged, "residual {:e}", sol.residual);
        assert!(sol.residual <= 1e-10);
        let d = vecops::nrm2(&vecops::sub(&sol.state.data, &s.rho0.data));
        assert!(d < 1e-9, "state deviation {d:e}");
        // Galerkin exactness
        assert!(galerkin_defect(&basis, &[0.0], &sol) < 1e-10);
        // coefficients in the correction basis match standard PT at eps = 0:
        // compare contribution-weighted (high orders have vanishing norms,
        // where bare coefficients are noise over noise)
        let cc = basis.correction_coefficients(&sol);
        let normalized: Vec<C64> = cc.iter().map(|v| v / sol.normalizer).collect();
        assert!((normalized[0] - c(1.0, 0.0)).norm() < 1e-10);
        for (k, v) in normalized.iter().enumerate().skip(1) {
            let weight = grid.get(&[k]).norm();
            assert!(v.norm() * weight < 1e-10, "order {k}: |c| = {:e}, weight {weight:e}", v.norm());
        }
    }

    #[test]
    fn variational_dominance_and_galerkin_gap() {
        // dense least squares beats standard PT at every tested eps; the
        // Galerkin route is within 10x of the optimum inside the window
        let built = small_kerr();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let m = 8usize;
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, m, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let basis = build_basis(&[&grid], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        for &eps in &[0.05, 0.2, 0.5, 1.0, 2.0] {
            let pt = standard_pt_eval(&grid, &family1, &[eps], 1e30);
            let ltilde_eps = trace_modify(&family1.at(&[eps]), c(1.0, 0.0)).matrix;
            let mut b_vec = vec![c(0.0, 0.0); basis.dim()];
            b_vec[0] = c(1.0, 0.0);
            let (ls_coeffs, _) = oracles::dense_least_squares_vpt(&ltilde_eps, basis.basis(), &b_vec).unwrap();
            // residual of the normalized least-squares state in L(eps)
            let mut state = basis.basis().combine(&ls_coeffs);
            let tr: C64 = {
                let dv = DensityVector::new(state.clone(), s.rho0.hilbert_dim).unwrap();
                dv.trace()
            };
            assert!(tr.norm() > 1e-12);
            vecops::scale(c(1.0, 0.0) / tr, &mut state);
            // dominance holds up to the machine-precision floor of the
            // full-space residual evaluation
            let ls_resid = family1.residual_norm(&[eps], &state);
            assert!(
                ls_resid <= pt.residual * (1.0 + 1e-9) + 1e-12,
                "eps {eps}: least-squares residual {ls_resid:e} vs PT {:e}",
                pt.residual
            );
            let vpt = vpt_solve(&basis, &family1, &[eps], 1e-2);
            if vpt.converged {
                assert!(
                    vpt.residual <= 10.0 * ls_resid.max(1e-12),
                    "eps {eps}: Galerkin {:e} vs optimal {ls_resid:e}",
                    vpt.residual
                );
            }
        }
    }

    #[test]
    fn vpt_window_contains_pt_window() {
        let built = small_kerr();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 12, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let basis = build_basis(&[&grid], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        let tol = 1e-2;
        let mut pt_count = 0;
        let mut vpt_count = 0;
        for k in -40..=40 {
            let eps = 0.25 * k as f64;
            let pt = standard_pt_eval(&grid, &family1, &[eps], tol);
            let vpt = vpt_solve(&basis, &family1, &[eps], tol);
            if pt.converged {
                pt_count += 1;
                assert!(vpt.converged, "PT converged at eps {eps} but VPT did not");
            }
            if vpt.converged {
                vpt_count += 1;
            }
        }
        assert!(pt_count > 0);
        assert!(vpt_count > pt_count, "VPT window {vpt_count} vs PT {pt_count}");
    }

    #[test]
    fn basis_dedup_and_single_point() {
        let built = driven_qubit();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let g0 = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 0, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let b0 = build_basis(&[&g0], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        assert_eq!(b0.len(), 1);

        let g = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 3, 0.0).unwrap();
        let single = build_basis(&[&g], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        let duplicated = build_basis(&[&g, &g], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        assert_eq!(single.len(), duplicated.len());
    }

    #[test]
    fn export_import_roundtrip_preserves_solutions() {
        let built = small_kerr();
        let s = setup(&built);
        let l1 = s.family.directions()[0].clone();
        let grid = pt_corrections_1d(&s.f, &s.ltilde, &s.rho0, &l1, 6, 0.0).unwrap();
        let family1 = one_direction_family(&s.family, 0);
        let basis = build_basis(&[&grid], family1.base(), family1.directions(), c(1.0, 0.0)).unwrap();
        let json = serde_json::to_string(&basis.export()).unwrap();
        let parsed: BasisExport = serde_json::from_str(&json).unwrap();
        let restored = PerturbationBasis::import(&parsed).unwrap();
        assert_eq!(restored.len(), basis.len());
        let a = vpt_solve(&basis, &family1, &[0.7], 1e-2);
        let b = vpt_solve(&restored, &family1, &[0.7], 1e-2);
        assert!((a.residual - b.residual).abs() < 1e-9 + 1e-5 * a.residual);
        let d = vecops::nrm2(&vecops::sub(&a.state.data, &b.state.data));
        assert!(d < 1e-9);
    }
}
