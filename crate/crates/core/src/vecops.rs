//! Small helpers on complex vectors used throughout the crate.

use crate::C64;

/// Conjugated inner product `sum_i conj(x_i) y_i`.
pub fn dot(x: &[C64], y: &[C64]) -> C64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Euclidean norm.
pub fn nrm2(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: C64, x: &mut [C64]) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

pub fn sub(x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn max_abs(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm()).fold(0.0, f64::max)
}
