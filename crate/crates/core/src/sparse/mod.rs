//! Sparse matrix storage and the Cholesky substrate used by every precision
//! matrix in the crate.
//!
//! Matrices are assembled as coordinate triplets ([`TripletMatrix`]) and
//! converted explicitly into compressed-column form ([`SparseMatrix`]).
//! Symmetric matrices are stored with both triangles present.

mod cholesky;
mod ordering;

pub use cholesky::{cholesky, sample_gmrf, CholeskyFactor, SymbolicCholesky};
pub use ordering::minimum_degree;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose")]
    NonSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("sparsity pattern differs from the one the factor was analysed with")]
    PatternMismatch,
}

/// Coordinate-format builder. Duplicate coordinates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct TripletMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl TripletMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        assert!(
            row < self.nrows && col < self.ncols,
            "triplet ({row}, {col}) outside {}x{}",
            self.nrows,
            self.ncols
        );
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(value);
    }

    /// Pushes `value` at (row, col) and, off the diagonal, at (col, row).
    pub fn push_sym(&mut self, row: usize, col: usize, value: f64) {
        self.push(row, col, value);
        if row != col {
            self.push(col, row, value);
        }
    }

    /// Adds every entry of `m`, shifted by the given offsets, scaled by `alpha`.
    pub fn push_block(&mut self, row0: usize, col0: usize, m: &SparseMatrix, alpha: f64) {
        for (i, j, v) in m.iter() {
            self.push(row0 + i, col0 + j, alpha * v);
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_csc(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; self.vals.len()];
        let mut vals = vec![0.0; self.vals.len()];
        for k in 0..self.vals.len() {
            let c = self.cols[k];
            let p = next[c];
            rows[p] = self.rows[k];
            vals[p] = self.vals[k];
            next[c] += 1;
        }
        // sort each column by row and sum duplicates
        let mut col_ptr = Vec::with_capacity(self.ncols + 1);
        let mut out_rows = Vec::with_capacity(rows.len());
        let mut out_vals = Vec::with_capacity(rows.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..self.ncols {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|&(r, _)| r);
            let mut it = scratch.iter().peekable();
            while let Some(&(r, v)) = it.next() {
                let mut acc = v;
                while let Some(&&(r2, v2)) = it.peek() {
                    if r2 != r {
                        break;
                    }
                    acc += v2;
                    it.next();
                }
                out_rows.push(r);
                out_vals.push(acc);
            }
            col_ptr.push(out_rows.len());
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr,
            row_idx: out_rows,
            values: out_vals,
        }
    }
}

/// Compressed-column sparse matrix with sorted, unique row indices per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            nrows: d.len(),
            ncols: d.len(),
            col_ptr: (0..=d.len()).collect(),
            row_idx: (0..d.len()).collect(),
            values: d.to_vec(),
        }
    }

    /// Builds from a dense matrix, keeping entries with |v| > 0.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = TripletMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    t.push(i, j, v);
                }
            }
        }
        t.to_csc()
    }

    /// Raw constructor; validates the compressed layout.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(col_ptr.len(), ncols + 1);
        assert_eq!(row_idx.len(), values.len());
        assert_eq!(*col_ptr.last().unwrap(), row_idx.len());
        for j in 0..ncols {
            let rows = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            assert!(rows.windows(2).all(|w| w[0] < w[1]), "column {j} unsorted");
            assert!(rows.iter().all(|&r| r < nrows));
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// Iterates over stored entries as (row, col, value), column by column.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    /// Position of (row, col) in the value array, if stored.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (rows, _) = self.col(col);
        rows.binary_search(&row).ok().map(|k| self.col_ptr[col] + k)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.position(row, col).map_or(0.0, |p| self.values[p])
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.col_ptr == other.col_ptr
            && self.row_idx == other.row_idx
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn check_finite(&self) -> Result<(), SparseError> {
        match self.iter().find(|(_, _, v)| !v.is_finite()) {
            Some((row, col, _)) => Err(SparseError::NonFinite { row, col }),
            None => Ok(()),
        }
    }

    /// Exact symmetry check on both pattern and values.
    pub fn check_symmetric(&self) -> Result<(), SparseError> {
        if self.nrows != self.ncols {
            return Err(SparseError::DimensionMismatch {
                expected: self.nrows,
                found: self.ncols,
            });
        }
        for (i, j, v) in self.iter() {
            if i != j && self.get(j, i) != v {
                return Err(SparseError::NonSymmetric { row: i, col: j });
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = TripletMatrix::with_capacity(self.ncols, self.nrows, self.nnz());
        for (i, j, v) in self.iter() {
            t.push(j, i, v);
        }
        t.to_csc()
    }

    pub fn scale(&self, alpha: f64) -> SparseMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `alpha * self + beta * other` on the union pattern.
    pub fn add_scaled(&self, alpha: f64, other: &SparseMatrix, beta: f64) -> SparseMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t = TripletMatrix::with_capacity(self.nrows, self.ncols, self.nnz() + other.nnz());
        t.push_block(0, 0, self, alpha);
        t.push_block(0, 0, other, beta);
        t.to_csc()
    }

    /// Adds `shift` to every diagonal entry, inserting missing ones.
    pub fn add_diagonal(&self, shift: f64) -> SparseMatrix {
        self.add_scaled(1.0, &SparseMatrix::identity(self.nrows), shift)
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        y
    }

    /// y = Aᵀ x
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| {
                (self.col_ptr[j]..self.col_ptr[j + 1])
                    .map(|p| self.values[p] * x[self.row_idx[p]])
                    .sum()
            })
            .collect()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut pattern = Vec::new();
        for j in 0..other.ncols {
            pattern.clear();
            for p in other.col_ptr[j]..other.col_ptr[j + 1] {
                let k = other.row_idx[p];
                let b = other.values[p];
                for q in self.col_ptr[k]..self.col_ptr[k + 1] {
                    let i = self.row_idx[q];
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        pattern.push(i);
                    }
                    acc[i] += self.values[q] * b;
                }
            }
            pattern.sort_unstable();
            for &i in &pattern {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &SparseMatrix) -> SparseMatrix {
        let (p, q) = (other.nrows, other.ncols);
        let mut t = TripletMatrix::with_capacity(self.nrows * p, self.ncols * q, self.nnz() * other.nnz());
        for (i, j, a) in self.iter() {
            for (k, l, b) in other.iter() {
                t.push(i * p + k, j * q + l, a * b);
            }
        }
        t.to_csc()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&SparseMatrix]) -> SparseMatrix {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let nrows = blocks.iter().map(|b| b.nrows).sum();
        let mut t = TripletMatrix::new(nrows, ncols);
        let mut r0 = 0;
        for b in blocks {
            assert_eq!(b.ncols, ncols, "vstack column mismatch");
            t.push_block(r0, 0, b, 1.0);
            r0 += b.nrows;
        }
        t.to_csc()
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SparseMatrix {
        let mut new_of = vec![Vec::new(); self.nrows];
        for (new, &old) in rows.iter().enumerate() {
            new_of[old].push(new);
        }
        let mut t = TripletMatrix::new(rows.len(), self.ncols);
        for (i, j, v) in self.iter() {
            for &n in &new_of[i] {
                t.push(n, j, v);
            }
        }
        t.to_csc()
    }

    /// Embeds the matrix as a block of a wider matrix, starting at `col0`.
    pub fn embed_cols(&self, col0: usize, total_cols: usize) -> SparseMatrix {
        let mut t = TripletMatrix::new(self.nrows, total_cols);
        t.push_block(0, col0, self, 1.0);
        t.to_csc()
    }

    /// The first `ncols` columns.
    pub fn select_cols_prefix(&self, ncols: usize) -> SparseMatrix {
        assert!(ncols <= self.ncols);
        let nnz = self.col_ptr[ncols];
        SparseMatrix::from_parts(
            self.nrows,
            ncols,
            self.col_ptr[..=ncols].to_vec(),
            self.row_idx[..nnz].to_vec(),
            self.values[..nnz].to_vec(),
        )
    }

    /// Dense row `i` (useful for small constraint systems).
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.ncols];
        for (r, j, v) in self.iter() {
            if r == i {
                row[j] = v;
            }
        }
        row
    }

    /// Dense rows of the matrix, as row-major vectors.
    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.iter() {
            rows[i][j] = v;
        }
        rows
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    /// Lower triangle (including the diagonal) of a square matrix.
    pub fn lower_triangle(&self) -> SparseMatrix {
        let mut t = TripletMatrix::new(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            if i >= j {
                t.push(i, j, v);
            }
        }
        t.to_csc()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let mut t = TripletMatrix::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, -1.0);
        let m = t.to_csc();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn kron_matches_dense() {
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]));
        let b = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 4.0, 0.0]));
        let k = a.kron(&b).to_dense();
        let expected = a.to_dense().kronecker(&b.to_dense());
        assert_eq!(k, expected);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]));
        let ata = a.transpose().matmul(&a).to_dense();
        let d = a.to_dense();
        assert_eq!(ata, d.transpose() * &d);
        assert_eq!(a.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(a.tr_mul_vec(&[1.0, 2.0]), vec![1.0, 6.0, 2.0]);
    }

    #[test]
    fn symmetry_check() {
        let mut t = TripletMatrix::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.5);
        assert_eq!(
            t.to_csc().check_symmetric(),
            Err(SparseError::NonSymmetric { row: 1, col: 0 })
        );
    }
}
