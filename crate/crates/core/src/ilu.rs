//! Incomplete LU factorization with dual dropping (ILUT).
//!
//! Row-based ILUT without pivoting: entries below `drop_tolerance` times
//! the row norm are discarded, and each row keeps at most
//! `fill_factor x nnz(A row)` entries split between the L and U parts.
//! Used as a cheap approximate-inverse preconditioner for the iterative
//! steady-state backend.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::C64;

#[derive(Debug, Clone)]
pub struct ILUFactorization {
    n: usize,
    // L strictly lower, unit diagonal implicit; U includes the diagonal.
    // Both stored by rows, column-sorted.
    l_rowptr: Vec<usize>,
    l_cols: Vec<usize>,
    l_vals: Vec<C64>,
    u_rowptr: Vec<usize>,
    u_cols: Vec<usize>,
    u_vals: Vec<C64>,
    pub drop_tolerance: f64,
    pub fill_factor: f64,
}

/// ILUT factorization. On a zero-pivot breakdown the factorization is
/// retried once with a diagonal shift of `1e-8 * max|A|`.
pub fn ilu_factor(a: &SparseMatrix, drop_tolerance: f64, fill_factor: f64) -> Result<ILUFactorization> {
    match ilut(a, drop_tolerance, fill_factor) {
        Ok(f) => Ok(f),
        Err(Error::BreakdownZeroPivot { .. }) => {
            let shift = 1e-8 * a.max_abs();
            let shifted = a.add_scaled(
                C64::new(1.0, 0.0),
                &SparseMatrix::identity(a.nrows()),
                C64::new(shift, 0.0),
            )?;
            match ilut(&shifted, drop_tolerance, fill_factor) {
                Ok(f) => Ok(f),
                Err(Error::BreakdownZeroPivot { row }) => {
                    Err(Error::SingularMatrix(format!("ILU breakdown persisted at row {row} after diagonal shift")))
                }
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

fn ilut(a: &SparseMatrix, drop_tolerance: f64, fill_factor: f64) -> Result<ILUFactorization> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!("ilu_factor: {}x{}", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    let zero = C64::new(0.0, 0.0);

    let mut l_rowptr = vec![0usize];
    let mut l_cols: Vec<usize> = Vec::new();
    let mut l_vals: Vec<C64> = Vec::new();
    let mut u_rowptr = vec![0usize];
    let mut u_cols: Vec<usize> = Vec::new();
    let mut u_vals: Vec<C64> = Vec::new();
    // fast access to U diagonal
    let mut u_diag = vec![zero; n];

    let mut w = vec![zero; n];
    let mut stamp = vec![usize::MAX; n];
    let mut cols: Vec<usize> = Vec::new();

    for i in 0..n {
        cols.clear();
        let mut row_nnz = 0usize;
        let mut norm = 0.0;
        for (j, v) in a.row(i) {
            stamp[*j] = i;
            w[*j] = *v;
            cols.push(*j);
            norm += v.norm_sqr();
            row_nnz += 1;
        }
        if row_nnz == 0 {
            return Err(Error::SingularMatrix(format!("empty row {i}")));
        }
        let norm = norm.sqrt();
        let tau = drop_tolerance * norm;
        let budget = ((fill_factor * row_nnz as f64).floor() as usize).max(2);

        // eliminate against previous rows in ascending column order
        cols.sort_unstable();
        let mut pos = 0;
        while pos < cols.len() {
            let k = cols[pos];
            pos += 1;
            if k >= i {
                break;
            }
            let mut wk = w[k];
            if wk == zero {
                continue;
            }
            wk /= u_diag[k];
            if wk.norm() < tau {
                w[k] = zero;
                continue;
            }
            w[k] = wk;
            // w -= w_k * U(k, k+1..)
            for t in u_rowptr[k]..u_rowptr[k + 1] {
                let j = u_cols[t];
                if j == k {
                    continue;
                }
                let upd = wk * u_vals[t];
                if stamp[j] == i {
                    w[j] -= upd;
                } else {
                    stamp[j] = i;
                    w[j] = -upd;
                    // keep `cols` sorted by inserting at the right place
                    let ins = cols[pos..].partition_point(|&c| c < j) + pos;
                    cols.insert(ins, j);
                }
            }
        }

        // split, drop, and keep the largest entries
        let mut l_part: Vec<(usize, C64)> = Vec::new();
        let mut u_part: Vec<(usize, C64)> = Vec::new();
        for &j in cols.iter() {
            let v = w[j];
            if v == zero {
                continue;
            }
            if j < i {
                if v.norm() >= tau {
                    l_part.push((j, v));
                }
            } else if j == i || v.norm() >= tau {
                u_part.push((j, v));
            }
        }
        let keep_l = budget / 2;
        let keep_u = budget - budget / 2;
        if l_part.len() > keep_l {
            l_part.sort_unstable_by(|a, b| b.1.norm().total_cmp(&a.1.norm()));
            l_part.truncate(keep_l);
            l_part.sort_unstable_by_key(|e| e.0);
        }
        if u_part.len() > keep_u {
            // never drop the diagonal
            u_part.sort_unstable_by(|a, b| b.1.norm().total_cmp(&a.1.norm()));
            let diag_pos = u_part.iter().position(|e| e.0 == i);
            if let Some(p) = diag_pos {
                if p >= keep_u {
                    let d = u_part.remove(p);
                    u_part.truncate(keep_u.saturating_sub(1));
                    u_part.push(d);
                } else {
                    u_part.truncate(keep_u);
                }
            } else {
                u_part.truncate(keep_u);
            }
            u_part.sort_unstable_by_key(|e| e.0);
        }
        let diag = u_part.iter().find(|e| e.0 == i).map(|e| e.1).unwrap_or(zero);
        if diag.norm() < 1e-300 || !diag.norm().is_finite() {
            return Err(Error::BreakdownZeroPivot { row: i });
        }
        u_diag[i] = diag;
        for (j, v) in l_part {
            l_cols.push(j);
            l_vals.push(v);
        }
        l_rowptr.push(l_cols.len());
        for (j, v) in u_part {
            u_cols.push(j);
            u_vals.push(v);
        }
        u_rowptr.push(u_cols.len());
    }
    Ok(ILUFactorization {
        n,
        l_rowptr,
        l_cols,
        l_vals,
        u_rowptr,
        u_cols,
        u_vals,
        drop_tolerance,
        fill_factor,
    })
}

impl ILUFactorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.l_vals.len() + self.u_vals.len()
    }

    /// Apply `(LU)^{-1}` by forward and backward substitution.
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        assert_eq!(b.len(), self.n, "ilu solve dimension mismatch");
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut acc = y[i];
            for t in self.l_rowptr[i]..self.l_rowptr[i + 1] {
                acc -= self.l_vals[t] * y[self.l_cols[t]];
            }
            y[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = y[i];
            let mut diag = C64::new(1.0, 0.0);
            for t in self.u_rowptr[i]..self.u_rowptr[i + 1] {
                let j = self.u_cols[t];
                if j == i {
                    diag = self.u_vals[t];
                } else {
                    acc -= self.u_vals[t] * y[j];
                }
            }
            y[i] = acc / diag;
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lu::lu_factor;
    use crate::vecops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn diagonal_is_exact_for_any_drop_tolerance() {
        let a = SparseMatrix::diagonal(&[c(2.0, 0.0), c(-3.0, 1.0), c(0.5, 0.0)]);
        for drop in [0.0, 1e-3, 0.5] {
            let f = ilu_factor(&a, drop, 10.0).unwrap();
            let x = f.solve(&[c(2.0, 0.0), c(-3.0, 1.0), c(1.0, 0.0)]);
            assert!((x[0] - c(1.0, 0.0)).norm() < 1e-14);
            assert!((x[1] - c(1.0, 0.0)).norm() < 1e-14);
            assert!((x[2] - c(2.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_drop_unbounded_fill_matches_full_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 40;
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, c(5.0 + rng.gen::<f64>(), 0.3)));
            for j in 0..n {
                if i != j && rng.gen::<f64>() < 0.1 {
                    triplets.push((i, j, c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)));
                }
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &triplets).unwrap();
        let ilu = ilu_factor(&a, 0.0, 1e9).unwrap();
        let lu = lu_factor(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let b: Vec<C64> = (0..n).map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let xi = ilu.solve(&b);
            let xl = lu.solve(&b).unwrap();
            let err = vecops::nrm2(&vecops::sub(&xi, &xl)) / vecops::nrm2(&xl);
            assert!(err < 1e-9, "ilu(0, inf) deviates from lu by {err:e}");
        }
    }

    #[test]
    fn fill_factor_bounds_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, c(4.0, 0.0)));
            for _ in 0..4 {
                let j = rng.gen_range(0..n);
                triplets.push((i, j, c(rng.gen::<f64>() - 0.5, 0.0)));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &triplets).unwrap();
        let fill = 2.0;
        let f = ilu_factor(&a, 1e-4, fill).unwrap();
        assert!(
            f.nnz() as f64 <= fill * a.nnz() as f64,
            "nnz(L+U) = {} exceeds {} x nnz(A) = {}",
            f.nnz(),
            fill,
            a.nnz()
        );
    }

    #[test]
    fn breakdown_recovers_with_shift() {
        // exactly-cancelling elimination zeroes the second pivot; the
        // internal diagonal-shift retry must rescue it
        let b = SparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(1.0, 0.0)), (0, 1, c(0.5, 0.0)), (1, 0, c(2.0, 0.0)), (1, 1, c(1.0, 0.0))],
        )
        .unwrap();
        let f = ilu_factor(&b, 0.0, 10.0).unwrap();
        let y = f.solve(&[c(1.0, 0.0), c(1.0, 0.0)]);
        assert!(y.iter().all(|v| v.norm().is_finite()));
    }

    #[test]
    fn empty_row_is_singular() {
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 0, c(1.0, 0.0)), (2, 2, c(1.0, 0.0))]).unwrap();
        assert!(matches!(ilu_factor(&a, 1e-4, 10.0), Err(Error::SingularMatrix(_))));
    }
}
