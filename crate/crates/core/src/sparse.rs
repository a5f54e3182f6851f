//! Compressed sparse row storage for complex matrices.
//!
//! This is the workhorse type for Liouvillian superoperators: assembly from
//! triplets, Kronecker products for vectorization, matrix-vector products,
//! sparse sums and products, and Matrix Market exchange (coordinate,
//! complex, general).

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::C64;

/// Sparse complex matrix in CSR format. Column indices are strictly sorted
/// within each row; explicit zeros are permitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<C64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        assert!(nrows > 0 && ncols > 0, "dimensions must be positive");
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        m.indptr = (0..=n).collect();
        m.indices = (0..n).collect();
        m.values = vec![C64::new(1.0, 0.0); n];
        m
    }

    pub fn diagonal(diag: &[C64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        m.indptr = (0..=n).collect();
        m.indices = (0..n).collect();
        m.values = diag.to_vec();
        m
    }

    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, C64)]) -> Result<Self> {
        if nrows == 0 || ncols == 0 {
            return Err(Error::DimensionMismatch("dimensions must be positive".into()));
        }
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::DimensionMismatch(format!(
                    "triplet ({i}, {j}) out of bounds for {nrows}x{ncols}"
                )));
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_unstable_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        for &k in &order {
            let (i, j, v) = triplets[k];
            if let (Some(&last_j), true) = (indices.last(), indptr[i + 1] > indptr[i]) {
                if last_j == j && indptr[i + 1] == indices.len() {
                    *values.last_mut().unwrap() += v;
                    continue;
                }
            }
            indices.push(j);
            values.push(v);
            indptr[i + 1] = indices.len();
        }
        // forward-fill row pointers for empty rows
        for i in 0..nrows {
            if indptr[i + 1] < indptr[i] {
                indptr[i + 1] = indptr[i];
            }
            indptr[i + 1] = indptr[i + 1].max(indptr[i]);
        }
        Ok(Self { nrows, ncols, indptr, indices, values })
    }

    pub fn from_dense(m: &nalgebra::DMatrix<C64>) -> Self {
        let mut triplets = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != C64::new(0.0, 0.0) {
                    triplets.push((i, j, m[(i, j)]));
                }
            }
        }
        if triplets.is_empty() {
            return Self::zeros(m.nrows().max(1), m.ncols().max(1));
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets).unwrap()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<C64> {
        let mut m = nalgebra::DMatrix::<C64>::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, *j)] += *v;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    /// Iterator over (column index, value) pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (&usize, &C64)> {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi].iter().zip(&self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        match self.indices[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[C64], y: &mut [C64]) {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            let mut acc = C64::new(0.0, 0.0);
            for k in lo..hi {
                acc += self.values[k] * x[self.indices[k]];
            }
            y[i] = acc;
        }
    }

    /// `y += alpha * A x` without allocating.
    pub fn matvec_acc(&self, alpha: C64, x: &[C64], y: &mut [C64]) {
        assert_eq!(x.len(), self.ncols);
        for i in 0..self.nrows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            let mut acc = C64::new(0.0, 0.0);
            for k in lo..hi {
                acc += self.values[k] * x[self.indices[k]];
            }
            y[i] += alpha * acc;
        }
    }

    /// Left action `x^T A` interpreted as `A^T x` (no conjugation).
    pub fn transpose_matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![C64::new(0.0, 0.0); self.ncols];
        for i in 0..self.nrows {
            let xi = x[i];
            if xi == C64::new(0.0, 0.0) {
                continue;
            }
            for (j, v) in self.row(i) {
                y[*j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        self.transform(false)
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        self.transform(true)
    }

    fn transform(&self, conj: bool) -> Self {
        let mut indptr = vec![0usize; self.ncols + 1];
        for &j in &self.indices {
            indptr[j + 1] += 1;
        }
        for j in 0..self.ncols {
            indptr[j + 1] += indptr[j];
        }
        let mut pos = indptr.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![C64::new(0.0, 0.0); self.nnz()];
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let p = pos[j];
                indices[p] = i;
                values[p] = if conj { self.values[k].conj() } else { self.values[k] };
                pos[j] += 1;
            }
        }
        Self { nrows: self.ncols, ncols: self.nrows, indptr, indices, values }
    }

    pub fn conjugate(&self) -> Self {
        let mut m = self.clone();
        for v in m.values.iter_mut() {
            *v = v.conj();
        }
        m
    }

    pub fn scaled(&self, alpha: C64) -> Self {
        let mut m = self.clone();
        for v in m.values.iter_mut() {
            *v *= alpha;
        }
        m
    }

    /// `alpha * self + beta * other`, merging sparsity patterns.
    pub fn add_scaled(&self, alpha: C64, other: &Self, beta: C64) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::DimensionMismatch(format!(
                "add: {}x{} vs {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.nrows {
            let (mut a, ahi) = (self.indptr[i], self.indptr[i + 1]);
            let (mut b, bhi) = (other.indptr[i], other.indptr[i + 1]);
            while a < ahi || b < bhi {
                let ja = if a < ahi { self.indices[a] } else { usize::MAX };
                let jb = if b < bhi { other.indices[b] } else { usize::MAX };
                if ja == jb {
                    indices.push(ja);
                    values.push(alpha * self.values[a] + beta * other.values[b]);
                    a += 1;
                    b += 1;
                } else if ja < jb {
                    indices.push(ja);
                    values.push(alpha * self.values[a]);
                    a += 1;
                } else {
                    indices.push(jb);
                    values.push(beta * other.values[b]);
                    b += 1;
                }
            }
            indptr[i + 1] = indices.len();
        }
        Ok(Self { nrows: self.nrows, ncols: self.ncols, indptr, indices, values })
    }

    /// Sparse matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let n = other.ncols;
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        // dense accumulator per row
        let mut acc = vec![C64::new(0.0, 0.0); n];
        let mut mark = vec![usize::MAX; n];
        let mut row_cols: Vec<usize> = Vec::new();
        for i in 0..self.nrows {
            row_cols.clear();
            for ka in self.indptr[i]..self.indptr[i + 1] {
                let k = self.indices[ka];
                let va = self.values[ka];
                for kb in other.indptr[k]..other.indptr[k + 1] {
                    let j = other.indices[kb];
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = C64::new(0.0, 0.0);
                        row_cols.push(j);
                    }
                    acc[j] += va * other.values[kb];
                }
            }
            row_cols.sort_unstable();
            for &j in &row_cols {
                indices.push(j);
                values.push(acc[j]);
            }
            indptr[i + 1] = indices.len();
        }
        Ok(Self { nrows: self.nrows, ncols: n, indptr, indices, values })
    }

    /// Kronecker product `self (x) other`; the first factor indexes the
    /// outer blocks.
    pub fn kron(&self, other: &Self) -> Self {
        let nrows = self.nrows * other.nrows;
        let ncols = self.ncols * other.ncols;
        let nnz = self.nnz() * other.nnz();
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        for ia in 0..self.nrows {
            for ib in 0..other.nrows {
                for (ja, va) in self.row(ia) {
                    for (jb, vb) in other.row(ib) {
                        indices.push(ja * other.ncols + jb);
                        values.push(va * vb);
                    }
                }
                indptr.push(indices.len());
            }
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Drop stored entries with magnitude below `tol` (structural cleanup).
    pub fn pruned(&self, tol: f64) -> Self {
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                if v.norm() > tol {
                    indices.push(*j);
                    values.push(*v);
                }
            }
            indptr[i + 1] = indices.len();
        }
        Self { nrows: self.nrows, ncols: self.ncols, indptr, indices, values }
    }

    /// Write in Matrix Market exchange format (coordinate, complex, general).
    pub fn write_matrix_market<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate complex general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.16e} {:.16e}", i + 1, j + 1, v.re, v.im)?;
            }
        }
        Ok(())
    }

    /// Read from Matrix Market exchange format (coordinate, complex or
    /// real, general).
    pub fn read_matrix_market<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let h = header.to_lowercase();
        if !h.starts_with("%%matrixmarket") || !h.contains("coordinate") || !h.contains("general") {
            return Err(Error::Parse(format!("unsupported Matrix Market header: {}", header.trim())));
        }
        let complex = h.contains("complex");
        let mut sizes = String::new();
        loop {
            sizes.clear();
            if r.read_line(&mut sizes)? == 0 {
                return Err(Error::Parse("missing size line".into()));
            }
            if !sizes.trim_start().starts_with('%') && !sizes.trim().is_empty() {
                break;
            }
        }
        let dims: Vec<usize> = sizes
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad size line: {sizes}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Parse(format!("bad size line: {sizes}")));
        }
        let (nrows, ncols, nnz) = (dims[0], dims[1], dims[2]);
        let mut triplets = Vec::with_capacity(nnz);
        let mut line = String::new();
        while triplets.len() < nnz {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("unexpected end of Matrix Market data".into()));
            }
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let toks: Vec<&str> = t.split_whitespace().collect();
            let need = if complex { 4 } else { 3 };
            if toks.len() < need {
                return Err(Error::Parse(format!("bad entry line: {t}")));
            }
            let i: usize = toks[0].parse().map_err(|_| Error::Parse(format!("bad row index: {t}")))?;
            let j: usize = toks[1].parse().map_err(|_| Error::Parse(format!("bad col index: {t}")))?;
            let re: f64 = toks[2].parse().map_err(|_| Error::Parse(format!("bad value: {t}")))?;
            let im: f64 = if complex {
                toks[3].parse().map_err(|_| Error::Parse(format!("bad value: {t}")))?
            } else {
                0.0
            };
            if i == 0 || j == 0 {
                return Err(Error::Parse("Matrix Market indices are 1-based".into()));
            }
            triplets.push((i - 1, j - 1, C64::new(re, im)));
        }
        Self::from_triplets(nrows, ncols, &triplets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = SparseMatrix::from_triplets(
            2,
            3,
            &[(1, 2, c(1.0, 0.0)), (0, 1, c(2.0, 1.0)), (1, 2, c(0.5, 0.0)), (1, 0, c(3.0, 0.0))],
        )
        .unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), c(2.0, 1.0));
        assert_eq!(m.get(1, 2), c(1.5, 0.0));
        assert_eq!(m.get(1, 0), c(3.0, 0.0));
        assert_eq!(m.get(0, 0), c(0.0, 0.0));
    }

    #[test]
    fn kron_identities() {
        let i2 = SparseMatrix::identity(2);
        let i4 = i2.kron(&i2);
        assert_eq!(i4.to_dense(), nalgebra::DMatrix::<C64>::identity(4, 4));

        let d = SparseMatrix::diagonal(&[c(2.0, 0.0), c(3.0, 0.0)]);
        let k = d.kron(&i2);
        let expect = SparseMatrix::diagonal(&[c(2.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(3.0, 0.0)]);
        assert_eq!(k.to_dense(), expect.to_dense());
    }

    #[test]
    fn kron_matches_index_formula() {
        // elementwise loop oracle on a random-ish 3x3 (x) 4x4
        let a = SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 0, c(1.0, 2.0)), (0, 2, c(-1.0, 0.5)), (1, 1, c(0.0, 3.0)), (2, 0, c(4.0, -1.0))],
        )
        .unwrap();
        let b = SparseMatrix::from_triplets(
            4,
            4,
            &[(0, 3, c(2.0, 0.0)), (1, 1, c(1.0, 1.0)), (2, 0, c(0.5, 0.0)), (3, 2, c(0.0, -2.0)), (3, 3, c(1.0, 0.0))],
        )
        .unwrap();
        let k = a.kron(&b);
        for i in 0..12 {
            for j in 0..12 {
                let want = a.get(i / 4, j / 4) * b.get(i % 4, j % 4);
                assert_eq!(k.get(i, j), want, "mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_matches_dense() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, c(1.0, 1.0)), (0, 2, c(2.0, 0.0)), (1, 1, c(-1.0, 0.0))]).unwrap();
        let b = SparseMatrix::from_triplets(3, 2, &[(0, 1, c(1.0, 0.0)), (1, 0, c(3.0, 1.0)), (2, 1, c(0.0, 1.0))]).unwrap();
        let p = a.matmul(&b).unwrap();
        let want = a.to_dense() * b.to_dense();
        assert_eq!(p.to_dense(), want);
    }

    #[test]
    fn adjoint_and_transpose() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, c(1.0, 2.0)), (1, 0, c(3.0, -1.0))]).unwrap();
        assert_eq!(a.transpose().get(1, 0), c(1.0, 2.0));
        assert_eq!(a.adjoint().get(1, 0), c(1.0, -2.0));
    }

    #[test]
    fn matrix_market_roundtrip() {
        let a = SparseMatrix::from_triplets(
            3,
            2,
            &[(0, 0, c(1.5, -2.25)), (2, 1, c(0.0, 1.0)), (1, 0, c(-3.0, 0.0))],
        )
        .unwrap();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let b = SparseMatrix::read_matrix_market(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn kron_entry_formula_random(
            entries_a in proptest::collection::vec((0usize..4, 0usize..3, -5.0f64..5.0, -5.0f64..5.0), 1..10),
            entries_b in proptest::collection::vec((0usize..3, 0usize..5, -5.0f64..5.0, -5.0f64..5.0), 1..10),
        ) {
            let ta: Vec<_> = entries_a.iter().map(|&(i, j, re, im)| (i, j, c(re, im))).collect();
            let tb: Vec<_> = entries_b.iter().map(|&(i, j, re, im)| (i, j, c(re, im))).collect();
            let a = SparseMatrix::from_triplets(4, 3, &ta).unwrap();
            let b = SparseMatrix::from_triplets(3, 5, &tb).unwrap();
            let k = a.kron(&b);
            prop_assert_eq!(k.nrows(), 12);
            prop_assert_eq!(k.ncols(), 15);
            for i in 0..12 {
                for j in 0..15 {
                    let want = a.get(i / 3, j / 5) * b.get(i % 3, j % 5);
                    prop_assert!((k.get(i, j) - want).norm() < 1e-14);
                }
            }
        }

        #[test]
        fn add_scaled_matches_dense(
            entries_a in proptest::collection::vec((0usize..4, 0usize..4, -5.0f64..5.0), 0..12),
            entries_b in proptest::collection::vec((0usize..4, 0usize..4, -5.0f64..5.0), 0..12),
        ) {
            let ta: Vec<_> = entries_a.iter().map(|&(i, j, re)| (i, j, c(re, re * 0.5))).collect();
            let tb: Vec<_> = entries_b.iter().map(|&(i, j, re)| (i, j, c(re, -re))).collect();
            let a = if ta.is_empty() { SparseMatrix::zeros(4, 4) } else { SparseMatrix::from_triplets(4, 4, &ta).unwrap() };
            let b = if tb.is_empty() { SparseMatrix::zeros(4, 4) } else { SparseMatrix::from_triplets(4, 4, &tb).unwrap() };
            let s = a.add_scaled(c(2.0, 0.0), &b, c(0.0, 1.0)).unwrap();
            let want = a.to_dense() * c(2.0, 0.0) + b.to_dense() * c(0.0, 1.0);
            prop_assert!((s.to_dense() - want).norm() < 1e-12);
        }
    }
}
