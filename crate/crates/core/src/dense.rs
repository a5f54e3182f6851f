//! Small dense complex solves and singular value decompositions.
//!
//! These back the reduced (Galerkin) systems, whose dimension is the
//! perturbation-basis size — at most a few hundred — and the rank analysis
//! of steady-state collections. Backed by nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::C64;

/// Solution of a small dense linear system.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub x: DVector<C64>,
    /// true when the LU path failed and a least-squares (pseudo-inverse)
    /// fallback produced the minimum-norm solution
    pub rank_deficient: bool,
}

/// Solve `A x = b`; falls back to a minimum-norm least-squares solution
/// when `A` is (numerically) rank-deficient.
pub fn small_dense_solve(a: &DMatrix<C64>, b: &DVector<C64>) -> DenseSolution {
    assert_eq!(a.nrows(), a.ncols(), "small_dense_solve expects a square matrix");
    assert_eq!(a.nrows(), b.len());
    let scale = a.norm().max(1e-300);
    if let Some(x) = a.clone().lu().solve(b) {
        let resid = (a * &x - b).norm();
        let ok = resid <= 1e-9 * (scale * x.norm() + b.norm()).max(1e-300) && x.iter().all(|v| v.is_finite());
        if ok {
            return DenseSolution { x, rank_deficient: false };
        }
    }
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1e-300);
    let x = svd.solve(b, eps).expect("svd solve cannot fail with computed factors");
    DenseSolution { x, rank_deficient: true }
}

/// Singular value decomposition `A = U diag(s) V^dagger` with singular
/// values sorted in descending order.
#[derive(Debug, Clone)]
pub struct DenseSvd {
    pub u: DMatrix<C64>,
    pub singular_values: Vec<f64>,
    /// `V^dagger` (adjoint already applied)
    pub vt: DMatrix<C64>,
}

pub fn dense_svd(a: &DMatrix<C64>) -> DenseSvd {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    // enforce descending order
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut u_sorted = DMatrix::<C64>::zeros(u.nrows(), u.ncols());
    let mut vt_sorted = DMatrix::<C64>::zeros(vt.nrows(), vt.ncols());
    let mut s_sorted = Vec::with_capacity(s.len());
    for (new, &old) in order.iter().enumerate() {
        u_sorted.set_column(new, &u.column(old));
        vt_sorted.set_row(new, &vt.row(old));
        s_sorted.push(s[old]);
    }
    DenseSvd { u: u_sorted, singular_values: s_sorted, vt: vt_sorted }
}

impl DenseSvd {
    /// Apply the pseudo-inverse to `b`, zeroing singular values below
    /// `eps * s_max`.
    pub fn pseudo_inverse_apply(&self, b: &DVector<C64>, eps: f64) -> DVector<C64> {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        let cutoff = eps * smax.max(1e-300);
        let proj = self.u.ad_mul(b);
        let mut scaled = DVector::<C64>::zeros(self.vt.nrows());
        for (k, &s) in self.singular_values.iter().enumerate() {
            if s > cutoff {
                scaled[k] = proj[k] / C64::new(s, 0.0);
            }
        }
        self.vt.ad_mul(&scaled)
    }

    pub fn rank(&self, eps: f64) -> usize {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > eps * smax.max(1e-300)).count()
    }
}

pub fn vec_to_dvector(v: &[C64]) -> DVector<C64> {
    DVector::from_column_slice(v)
}
