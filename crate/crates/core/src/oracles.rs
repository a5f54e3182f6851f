//! Dense brute-force reference computations.
//!
//! Everything here exists to cross-check the sparse production paths in
//! tests and acceptance runs: dense nullspace steady states, dense
//! pseudo-inverse application, dense least squares over a basis, and
//! finite-difference gradients. None of it is used by the solvers
//! themselves, and all entry points enforce a size cap.

use nalgebra::{DMatrix, DVector};

use crate::dense::{dense_svd, DenseSvd};
use crate::error::{Error, Result};
use crate::lindblad::DensityVector;
use crate::ortho::OrthonormalBasis;
use crate::sparse::SparseMatrix;
use crate::C64;

/// Hard cap on the Liouvillian dimension accepted by the dense oracles.
pub const ORACLE_DIM_CAP: usize = 20_000;
const DENSE_FACTOR_CAP: usize = 4_000;

fn check_cap(n: usize) -> Result<()> {
    if n > ORACLE_DIM_CAP || n > DENSE_FACTOR_CAP {
        return Err(Error::InvalidParameter(format!(
            "dense oracle refused: dimension {n} exceeds cap {DENSE_FACTOR_CAP}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DenseSteadyState {
    pub state: DensityVector,
    /// number of near-zero singular values of `L`
    pub kernel_dim: usize,
    /// ratio of largest to smallest nonzero singular value
    pub condition_estimate: f64,
}

/// Steady state from the nullspace of the dense Liouvillian, found by SVD
/// and trace-normalized. Fails with [`Error::DegenerateKernel`] when the
/// kernel is not one-dimensional.
pub fn dense_steady_state(l: &SparseMatrix) -> Result<DenseSteadyState> {
    check_cap(l.nrows())?;
    let ld = l.to_dense();
    let svd = dense_svd(&ld);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * smax.max(1e-300);
    let kernel_dim = svd.singular_values.iter().filter(|&&s| s < tol).count();
    if kernel_dim != 1 {
        return Err(Error::DegenerateKernel(kernel_dim));
    }
    // last right singular vector spans the kernel
    let k = svd.singular_values.len() - 1;
    let v_row = svd.vt.row(k);
    let mut state: Vec<C64> = v_row.iter().map(|c| c.conj()).collect();
    let d = (state.len() as f64).sqrt().round() as usize;
    let mut rho = DensityVector::new(state.clone(), d)?;
    let tr = rho.trace();
    if tr.norm() < 1e-12 {
        return Err(Error::SingularMatrix("kernel vector has zero trace".into()));
    }
    let scale = C64::new(1.0, 0.0) / tr;
    for v in state.iter_mut() {
        *v *= scale;
    }
    rho = DensityVector::new(state, d)?;
    let smin_nonzero = svd.singular_values.iter().rev().find(|&&s| s >= tol).copied().unwrap_or(smax);
    Ok(DenseSteadyState { state: rho, kernel_dim, condition_estimate: smax / smin_nonzero.max(1e-300) })
}

/// Kernel dimension alone (usable on constructed degenerate models).
pub fn dense_kernel_dim(l: &SparseMatrix) -> Result<usize> {
    check_cap(l.nrows())?;
    let svd = dense_svd(&l.to_dense());
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * smax.max(1e-300);
    Ok(svd.singular_values.iter().filter(|&&s| s < tol).count())
}

/// Faster dense steady state through a dense LU of the trace-modified
/// system; still fully independent of the sparse factorization path.
pub fn dense_steady_state_lu(l: &SparseMatrix) -> Result<DensityVector> {
    check_cap(l.nrows())?;
    let n = l.nrows();
    let d = (n as f64).sqrt().round() as usize;
    let mut ld = l.to_dense();
    for i in 0..d {
        ld[(0, i + d * i)] += C64::new(1.0, 0.0);
    }
    let mut rhs = DVector::<C64>::zeros(n);
    rhs[0] = C64::new(1.0, 0.0);
    let x = ld
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularMatrix("dense trace-modified solve failed".into()))?;
    let mut data: Vec<C64> = x.iter().copied().collect();
    let rho = DensityVector::new(data.clone(), d)?;
    let tr = rho.trace();
    if tr.norm() < 1e-12 {
        return Err(Error::SingularMatrix("dense steady state has zero trace".into()));
    }
    let scale = C64::new(1.0, 0.0) / tr;
    for v in data.iter_mut() {
        *v *= scale;
    }
    DensityVector::new(data, d)
}

/// Cached dense SVD of a generator, for repeated pseudo-inverse application.
pub struct DensePseudoInverse {
    svd: DenseSvd,
}

impl DensePseudoInverse {
    pub fn new(l: &SparseMatrix) -> Result<Self> {
        check_cap(l.nrows())?;
        Ok(Self { svd: dense_svd(&l.to_dense()) })
    }

    /// Minimum-norm solution of `L x = v`.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let out = self.svd.pseudo_inverse_apply(&DVector::from_column_slice(v), 1e-10);
        out.iter().copied().collect()
    }
}

pub fn dense_pseudo_inverse_apply(l: &SparseMatrix, v: &[C64]) -> Result<Vec<C64>> {
    Ok(DensePseudoInverse::new(l)?.apply(v))
}

/// Exact least-squares coefficients `argmin_c |Ltilde Q c - b|` over the
/// full space, by SVD of the tall matrix `Ltilde Q`.
pub fn dense_least_squares_vpt(l_tilde: &SparseMatrix, q: &OrthonormalBasis, b: &[C64]) -> Result<(Vec<C64>, f64)> {
    check_cap(l_tilde.nrows())?;
    let n = l_tilde.nrows();
    let m = q.len();
    let mut lq = DMatrix::<C64>::zeros(n, m);
    for k in 0..m {
        let col = q.column(k);
        let y = l_tilde.matvec(&col);
        for (i, v) in y.iter().enumerate() {
            lq[(i, k)] = *v;
        }
    }
    let svd = dense_svd(&lq);
    let eps = 1e-12;
    let c = svd.pseudo_inverse_apply(&DVector::from_column_slice(b), eps);
    let resid = (&lq * &c - DVector::from_column_slice(b)).norm();
    Ok((c.iter().copied().collect(), resid))
}

/// Central finite differences with one Richardson extrapolation step.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h0: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = h0 * x[k].abs().max(1.0);
        let mut central = |step: f64| {
            xp[k] = x[k] + step;
            let fp = f(&xp);
            xp[k] = x[k] - step;
            let fm = f(&xp);
            xp[k] = x[k];
            (fp - fm) / (2.0 * step)
        };
        let d1 = central(h);
        let d2 = central(h / 2.0);
        // Richardson: error in d2 is ~ (d1 - d2)/3 for O(h^2) differences
        grad[k] = (4.0 * d2 - d1) / 3.0;
    }
    grad
}

/// Trace norm (sum of singular values) of the de-vectorized difference.
pub fn trace_norm_diff(a: &DensityVector, b: &DensityVector) -> f64 {
    let diff = a.to_matrix() - b.to_matrix();
    dense_svd(&diff).singular_values.iter().sum()
}

/// Trace norm of a single de-vectorized state.
pub fn trace_norm(a: &DensityVector) -> f64 {
    dense_svd(&a.to_matrix()).singular_values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{build_liouvillian, LindbladModel};
    use crate::vecops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn decay_liouvillian() -> SparseMatrix {
        let sm = SparseMatrix::from_triplets(2, 2, &[(1, 0, c(1.0, 0.0))]).unwrap();
        build_liouvillian(&LindbladModel::new(SparseMatrix::zeros(2, 2), vec![(sm, 1.0)]).unwrap())
    }

    #[test]
    fn decay_steady_state_is_ground() {
        let l = decay_liouvillian();
        let ss = dense_steady_state(&l).unwrap();
        let m = ss.state.to_matrix();
        assert!((m[(1, 1)] - c(1.0, 0.0)).norm() < 1e-10);
        assert!(m[(0, 0)].norm() < 1e-10);
        assert_eq!(ss.kernel_dim, 1);
    }

    #[test]
    fn detects_constructed_degeneracy() {
        // block-diagonal Liouvillian of two independent decays conserves
        // each block: kernel dimension 2
        let l1 = decay_liouvillian();
        let n = l1.nrows();
        let mut tri = Vec::new();
        for i in 0..n {
            for (j, v) in l1.row(i) {
                tri.push((i, *j, *v));
                tri.push((i + n, *j + n, *v));
            }
        }
        let block = SparseMatrix::from_triplets(2 * n, 2 * n, &tri).unwrap();
        assert_eq!(dense_kernel_dim(&block).unwrap(), 2);
    }

    #[test]
    fn pseudo_inverse_kills_nullspace_component() {
        let l = decay_liouvillian();
        let p = DensePseudoInverse::new(&l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<C64> = (0..4).map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let x = p.apply(&v);
        // kernel is vec(|g><g|): component of x along it must vanish
        let mut kernel = vec![c(0.0, 0.0); 4];
        kernel[3] = c(1.0, 0.0);
        assert!(vecops::dot(&kernel, &x).norm() < 1e-10);
    }

    #[test]
    fn pseudo_inverse_is_plain_inverse_when_invertible() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, c(2.0, 0.0)), (0, 1, c(1.0, 0.0)), (1, 1, c(1.0, 1.0))]).unwrap();
        let x = dense_pseudo_inverse_apply(&a, &[c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let r = vecops::sub(&a.matvec(&x), &[c(1.0, 0.0), c(0.0, 0.0)]);
        assert!(vecops::nrm2(&r) < 1e-12);
    }

    #[test]
    fn fd_gradient_exact_for_quadratic() {
        let grad = finite_difference_gradient(|x| x[0] * x[0] + 3.0 * x[1] * x[1] - 2.0 * x[0] * x[1], &[1.0, 2.0], 1e-4);
        assert!((grad[0] - (2.0 - 4.0)).abs() < 1e-9);
        assert!((grad[1] - (12.0 - 2.0)).abs() < 1e-9);
    }

    #[test]
    fn fd_gradient_matches_polynomial() {
        let grad = finite_difference_gradient(|x| x[0].powi(3) * x[1] + x[1].powi(2), &[0.7, -1.2], 1e-4);
        let want = [3.0 * 0.7f64.powi(2) * -1.2, 0.7f64.powi(3) + 2.0 * -1.2];
        assert!((grad[0] - want[0]).abs() < 1e-8);
        assert!((grad[1] - want[1]).abs() < 1e-8);
    }

    #[test]
    fn cap_is_enforced() {
        let big = SparseMatrix::identity(DENSE_FACTOR_CAP + 1);
        assert!(dense_steady_state(&big).is_err());
    }
}
