//! Modified Gram-Schmidt orthonormalization with one reorthogonalization
//! pass.
//!
//! Perturbative correction vectors become nearly parallel at high order
//! (the recursion is a power iteration in disguise), so a single MGS sweep
//! loses orthogonality; the second pass restores it to machine precision.
//! Vectors whose residual after projection falls below `drop_tol` times
//! their original norm are discarded as linearly dependent.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::vecops;
use crate::C64;

pub const DEFAULT_DROP_TOL: f64 = 1e-12;

/// Orthonormal set of complex vectors sharing one ambient dimension.
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    dim: usize,
    /// dim x count column matrix
    columns: DMatrix<C64>,
}

/// Bookkeeping from a tracked orthonormalization: `input[j] = sum_i
/// r[(i, j)] q_i + (dropped residual)`, plus which inputs were kept.
#[derive(Debug, Clone)]
pub struct OrthoRecord {
    /// count x n_inputs upper-trapezoidal coefficient matrix
    pub r: DMatrix<C64>,
    /// indices of inputs that produced a basis vector
    pub kept: Vec<usize>,
}

impl OrthonormalBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.columns
    }

    pub fn column(&self, k: usize) -> Vec<C64> {
        self.columns.column(k).iter().copied().collect()
    }

    /// `Q q` for a coefficient vector `q`.
    pub fn combine(&self, coeffs: &[C64]) -> Vec<C64> {
        assert_eq!(coeffs.len(), self.len());
        let mut out = vec![C64::new(0.0, 0.0); self.dim];
        for (k, c) in coeffs.iter().enumerate() {
            if *c != C64::new(0.0, 0.0) {
                for (o, v) in out.iter_mut().zip(self.columns.column(k).iter()) {
                    *o += c * v;
                }
            }
        }
        out
    }

    /// `Q^dagger v`.
    pub fn project(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.dim);
        (0..self.len())
            .map(|k| self.columns.column(k).iter().zip(v).map(|(q, x)| q.conj() * x).sum())
            .collect()
    }

    /// Gram matrix `Q^dagger Q` (diagnostic).
    pub fn gram(&self) -> DMatrix<C64> {
        self.columns.ad_mul(&self.columns)
    }
}

/// Orthonormalize `vectors`, dropping near-dependent ones.
pub fn orthonormalize(vectors: &[Vec<C64>], drop_tol: f64) -> Result<OrthonormalBasis> {
    Ok(orthonormalize_tracked(vectors, drop_tol)?.0)
}

/// Orthonormalize and report the triangular coefficients relating inputs
/// to the basis.
pub fn orthonormalize_tracked(vectors: &[Vec<C64>], drop_tol: f64) -> Result<(OrthonormalBasis, OrthoRecord)> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("orthonormalize: no vectors".into()));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(Error::EmptyInput("orthonormalize: zero-dimensional vectors".into()));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "orthonormalize: mixed dimensions {} vs {dim}",
                v.len()
            )));
        }
    }
    let mut q: Vec<Vec<C64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut r_cols: Vec<Vec<C64>> = Vec::new();
    // vectors at the relative machine-noise floor of the dominant scale
    // carry no information and must not be normalized into noise
    let max_norm = vectors.iter().map(|v| vecops::nrm2(v)).fold(0.0, f64::max);

    for (idx, v) in vectors.iter().enumerate() {
        let orig_norm = vecops::nrm2(v);
        if orig_norm < 1e-14 * max_norm || orig_norm == 0.0 {
            r_cols.push(vec![C64::new(0.0, 0.0); q.len()]);
            continue;
        }
        let mut w = v.clone();
        let mut coeffs = vec![C64::new(0.0, 0.0); q.len()];
        for _pass in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let c = vecops::dot(qk, &w);
                vecops::axpy(-c, qk, &mut w);
                coeffs[k] += c;
            }
        }
        let res_norm = vecops::nrm2(&w);
        if res_norm < drop_tol * orig_norm {
            // linearly dependent on the kept set; record its expansion only
            let mut col = coeffs;
            col.resize(q.len(), C64::new(0.0, 0.0));
            r_cols.push(col);
            continue;
        }
        vecops::scale(C64::new(1.0 / res_norm, 0.0), &mut w);
        q.push(w);
        kept.push(idx);
        let mut col = coeffs;
        col.push(C64::new(res_norm, 0.0));
        r_cols.push(col);
    }
    if q.is_empty() {
        return Err(Error::EmptyInput("orthonormalize: all vectors were zero or dependent".into()));
    }
    let count = q.len();
    let mut columns = DMatrix::<C64>::zeros(dim, count);
    for (k, qk) in q.iter().enumerate() {
        for (i, v) in qk.iter().enumerate() {
            columns[(i, k)] = *v;
        }
    }
    let mut r = DMatrix::<C64>::zeros(count, vectors.len());
    for (j, col) in r_cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            r[(i, j)] = *v;
        }
    }
    Ok((OrthonormalBasis { dim, columns }, OrthoRecord { r, kept }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(dim: usize, k: usize) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); dim];
        v[k] = C64::new(1.0, 0.0);
        v
    }

    #[test]
    fn canonical_vectors_pass_through() {
        let basis = orthonormalize(&[e(4, 0), e(4, 1)], 1e-12).unwrap();
        assert_eq!(basis.len(), 2);
        assert!((basis.column(0)[0] - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((basis.column(1)[1] - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dependent_vector_is_dropped() {
        let mut two_e1 = e(3, 0);
        two_e1[0] = C64::new(2.0, 0.0);
        let (basis, rec) = orthonormalize_tracked(&[e(3, 0), two_e1], 1e-12).unwrap();
        assert_eq!(basis.len(), 1);
        assert_eq!(rec.kept, vec![0]);
        // the dropped vector's expansion is still recorded: 2*e1 = 2*q0
        assert!((rec.r[(0, 1)] - C64::new(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn random_vectors_give_identity_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 50;
        let vectors: Vec<Vec<C64>> = (0..20)
            .map(|_| (0..dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect())
            .collect();
        let basis = orthonormalize(&vectors, 1e-12).unwrap();
        assert_eq!(basis.len(), 20);
        let g = basis.gram();
        let eye = DMatrix::<C64>::identity(20, 20);
        assert!((g - eye).norm() < 1e-10);
    }

    #[test]
    fn idempotent_on_own_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 12;
        let vectors: Vec<Vec<C64>> = (0..5)
            .map(|_| (0..dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect())
            .collect();
        let basis = orthonormalize(&vectors, 1e-12).unwrap();
        let cols: Vec<Vec<C64>> = (0..basis.len()).map(|k| basis.column(k)).collect();
        let again = orthonormalize(&cols, 1e-12).unwrap();
        assert_eq!(again.len(), basis.len());
        // same span: projector difference vanishes
        let p1 = basis.matrix() * basis.matrix().adjoint();
        let p2 = again.matrix() * again.matrix().adjoint();
        assert!((p1 - p2).norm() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(orthonormalize(&[], 1e-12), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn tracked_coefficients_reconstruct_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 9;
        let vectors: Vec<Vec<C64>> = (0..4)
            .map(|_| (0..dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect())
            .collect();
        let (basis, rec) = orthonormalize_tracked(&vectors, 1e-12).unwrap();
        for (j, v) in vectors.iter().enumerate() {
            let coeffs: Vec<C64> = (0..basis.len()).map(|i| rec.r[(i, j)]).collect();
            let rebuilt = basis.combine(&coeffs);
            let err = vecops::nrm2(&vecops::sub(&rebuilt, v));
            assert!(err < 1e-12 * vecops::nrm2(v).max(1.0), "vector {j} reconstruction error {err:e}");
        }
    }
}
