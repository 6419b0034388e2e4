use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{minimum_degree, SparseError, SparseMatrix};

/// Ordering, elimination tree and the pattern of L for one sparsity pattern.
///
/// Analysing once and refactoring many times is the normal use: the Newton
/// iterations and every hyperparameter point share one pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    /// perm[k] = original index of pivot k
    perm: Vec<usize>,
    /// Pattern of the analysed matrix, to detect misuse.
    q_col_ptr: Vec<usize>,
    q_row_idx: Vec<usize>,
    /// Upper triangle of P Q Pᵀ (CSC), filled from Q through `c_source`.
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    c_source: Vec<usize>,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl SymbolicCholesky {
    pub fn analyze(q: &SparseMatrix) -> Result<Self, SparseError> {
        let n = q.nrows();
        if q.ncols() != n {
            return Err(SparseError::DimensionMismatch {
                expected: n,
                found: q.ncols(),
            });
        }
        let perm = minimum_degree(q);
        Self::with_ordering(q, perm)
    }

    /// Analysis under a caller-supplied ordering.
    pub fn with_ordering(q: &SparseMatrix, perm: Vec<usize>) -> Result<Self, SparseError> {
        let n = q.nrows();
        if perm.len() != n {
            return Err(SparseError::DimensionMismatch {
                expected: n,
                found: perm.len(),
            });
        }
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }

        // upper triangle of C = P Q Pᵀ, remembering where each value comes from
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(q.nnz() / 2 + n);
        for j in 0..n {
            let (rows, _) = q.col(j);
            for (off, &i) in rows.iter().enumerate() {
                let (ci, cj) = (pinv[i], pinv[j]);
                if ci <= cj {
                    entries.push((cj, ci, q.col_ptr()[j] + off));
                }
            }
        }
        entries.sort_unstable();
        let mut c_col_ptr = vec![0usize; n + 1];
        for &(cj, _, _) in &entries {
            c_col_ptr[cj + 1] += 1;
        }
        for j in 0..n {
            c_col_ptr[j + 1] += c_col_ptr[j];
        }
        let c_row_idx: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let c_source: Vec<usize> = entries.iter().map(|e| e.2).collect();

        // elimination tree of the upper-triangular C
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &i0 in &c_row_idx[c_col_ptr[k]..c_col_ptr[k + 1]] {
                let mut i = i0;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // row patterns of L give the column counts and, in order, the row indices
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            let top = ereach(&c_col_ptr, &c_row_idx, &parent, k, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
                rows_of[k].push(i);
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
        }
        let mut l_row_idx = vec![0usize; l_col_ptr[n]];
        let mut next = l_col_ptr.clone();
        for k in 0..n {
            // diagonal first, then increasing row index
            l_row_idx[next[k]] = k;
            next[k] += 1;
            for &i in &rows_of[k] {
                l_row_idx[next[i]] = k;
                next[i] += 1;
            }
        }

        Ok(Self {
            n,
            perm,
            q_col_ptr: q.col_ptr().to_vec(),
            q_row_idx: q.row_idx().to_vec(),
            c_col_ptr,
            c_row_idx,
            c_source,
            parent,
            l_col_ptr,
            l_row_idx,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Number of stored entries in L (including the diagonal).
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    fn check_pattern(&self, q: &SparseMatrix) -> Result<(), SparseError> {
        if q.nrows() != self.n || q.ncols() != self.n {
            return Err(SparseError::DimensionMismatch {
                expected: self.n,
                found: q.nrows(),
            });
        }
        if q.col_ptr() != self.q_col_ptr.as_slice() || q.row_idx() != self.q_row_idx.as_slice() {
            return Err(SparseError::PatternMismatch);
        }
        Ok(())
    }

    /// Numeric factorization of a matrix with the analysed pattern.
    ///
    /// Only the upper triangle (in pivot order) is read; callers that need a
    /// symmetry guarantee use [`cholesky`], which checks it.
    pub fn factor(self: &Arc<Self>, q: &SparseMatrix) -> Result<CholeskyFactor, SparseError> {
        self.check_pattern(q)?;
        let n = self.n;
        let qv = q.values();
        let c_vals: Vec<f64> = self.c_source.iter().map(|&p| qv[p]).collect();
        if let Some(p) = c_vals.iter().position(|v| !v.is_finite()) {
            let col = self.c_col_ptr.partition_point(|&s| s <= p) - 1;
            return Err(SparseError::NonFinite {
                row: self.perm[self.c_row_idx[p]],
                col: self.perm[col],
            });
        }

        let lp = &self.l_col_ptr;
        let mut lx = vec![0.0; lp[n]];
        let mut next = lp.clone();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&self.c_col_ptr, &self.c_row_idx, &self.parent, k, &mut stack, &mut mark);
            for p in self.c_col_ptr[k]..self.c_col_ptr[k + 1] {
                x[self.c_row_idx[p]] = c_vals[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[self.l_row_idx[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                lx[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) {
                return Err(SparseError::NotPositiveDefinite {
                    pivot: self.perm[k],
                    value: d,
                });
            }
            lx[next[k]] = d.sqrt();
            next[k] += 1;
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            values: lx,
        })
    }
}

/// Nonzero pattern of row k of L, written to `stack[top..]` in topological order.
fn ereach(
    c_col_ptr: &[usize],
    c_row_idx: &[usize],
    parent: &[usize],
    k: usize,
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    for &i0 in &c_row_idx[c_col_ptr[k]..c_col_ptr[k + 1]] {
        if i0 > k {
            continue;
        }
        let mut i = i0;
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// P·Q·Pᵀ = L·Lᵀ with L lower triangular, stored column-wise in pivot order.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
}

/// Analyses and factors `q`, checking symmetry and finiteness first.
pub fn cholesky(q: &SparseMatrix) -> Result<CholeskyFactor, SparseError> {
    q.check_symmetric()?;
    q.check_finite()?;
    let symbolic = Arc::new(SymbolicCholesky::analyze(q)?);
    symbolic.factor(q)
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn permutation(&self) -> &[usize] {
        &self.symbolic.perm
    }

    /// Refactors a matrix with the same pattern, reusing the analysis.
    pub fn refactor(&self, q: &SparseMatrix) -> Result<CholeskyFactor, SparseError> {
        self.symbolic.factor(q)
    }

    /// L as a sparse lower-triangular matrix in pivot order.
    pub fn lower_factor(&self) -> SparseMatrix {
        let s = &self.symbolic;
        SparseMatrix::from_parts(s.n, s.n, s.l_col_ptr.clone(), s.l_row_idx.clone(), self.values.clone())
    }

    pub fn log_det(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|j| self.values[s.l_col_ptr[j]].ln()).sum::<f64>()
    }

    fn check_len(&self, len: usize) -> Result<(), SparseError> {
        if len != self.dim() {
            return Err(SparseError::DimensionMismatch {
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }

    /// y ← L⁻¹ y (pivot order)
    fn lsolve(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.l_col_ptr[j];
            y[j] /= self.values[p0];
            let yj = y[j];
            if yj != 0.0 {
                for p in p0 + 1..s.l_col_ptr[j + 1] {
                    y[s.l_row_idx[p]] -= self.values[p] * yj;
                }
            }
        }
    }

    /// y ← L⁻ᵀ y (pivot order)
    fn ltsolve(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.l_col_ptr[j];
            let mut acc = y[j];
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                acc -= self.values[p] * y[s.l_row_idx[p]];
            }
            y[j] = acc / self.values[p0];
        }
    }

    fn solve_into(&self, b: &[f64], out: &mut [f64], work: &mut [f64]) {
        let perm = &self.symbolic.perm;
        for (k, &p) in perm.iter().enumerate() {
            work[k] = b[p];
        }
        self.lsolve(work);
        self.ltsolve(work);
        for (k, &p) in perm.iter().enumerate() {
            out[p] = work[k];
        }
    }

    /// Solves Q x = b.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.check_len(b.len())?;
        let mut out = vec![0.0; b.len()];
        let mut work = vec![0.0; b.len()];
        self.solve_into(b, &mut out, &mut work);
        Ok(out)
    }

    /// Solves Q X = B in place for a column-major block of right-hand sides.
    /// Columns are independent and solved in parallel on the current rayon pool.
    pub fn solve_many(&self, block: &mut [f64]) -> Result<(), SparseError> {
        let n = self.dim();
        if n == 0 {
            return Ok(());
        }
        if block.len() % n != 0 {
            return Err(SparseError::DimensionMismatch {
                expected: n,
                found: block.len() % n,
            });
        }
        block.par_chunks_mut(n).for_each_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(work, rhs), col| {
                rhs.copy_from_slice(col);
                self.solve_into(rhs, col, work);
            },
        );
        Ok(())
    }

    /// Column-major block B (original order) to L⁻¹ P B (pivot order), in place.
    /// Zeros in B are skipped, so sparse right-hand sides only touch their
    /// elimination-tree reach.
    pub fn forward_many(&self, block: &mut [f64]) -> Result<(), SparseError> {
        let n = self.dim();
        if n == 0 {
            return Ok(());
        }
        if block.len() % n != 0 {
            return Err(SparseError::DimensionMismatch {
                expected: n,
                found: block.len() % n,
            });
        }
        let perm = &self.symbolic.perm;
        block.par_chunks_mut(n).for_each_init(
            || vec![0.0; n],
            |work, col| {
                for (k, &p) in perm.iter().enumerate() {
                    work[k] = col[p];
                }
                self.lsolve(work);
                col.copy_from_slice(work);
            },
        );
        Ok(())
    }

    /// y (pivot order) to Pᵀ L⁻ᵀ y (original order).
    pub fn backward(&self, y: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.apply_inverse_root_t(y)
    }

    /// Maps z to Pᵀ L⁻ᵀ z, a draw from N(0, Q⁻¹) when z is standard normal.
    pub fn apply_inverse_root_t(&self, z: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.check_len(z.len())?;
        let mut y = z.to_vec();
        self.ltsolve(&mut y);
        let mut out = vec![0.0; y.len()];
        for (k, &p) in self.symbolic.perm.iter().enumerate() {
            out[p] = y[k];
        }
        Ok(out)
    }

    /// Diagonal of Q⁻¹ by the Takahashi recursions on the pattern of L.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let s = &self.symbolic;
        let (lp, li, lx) = (&s.l_col_ptr, &s.l_row_idx, &self.values);
        let mut sigma = vec![0.0; lx.len()];
        let mut acc = Vec::new();
        for i in (0..s.n).rev() {
            let (p0, p1) = (lp[i] + 1, lp[i + 1]);
            let rows = &li[p0..p1];
            let vals = &lx[p0..p1];
            let lii = lx[lp[i]];
            // acc[a] = Σ_b L[r_b, i] Σ[r_b, r_a]; the pattern of column r_b
            // contains every r_a ≥ r_b, so one forward walk per b suffices
            acc.clear();
            acc.resize(rows.len(), 0.0);
            for b in 0..rows.len() {
                let c = rows[b];
                let (mut q, qe) = (lp[c], lp[c + 1]);
                for a in b..rows.len() {
                    while li[q] != rows[a] {
                        q += 1;
                        debug_assert!(q < qe, "selected inverse pattern closed under elimination");
                    }
                    let v = sigma[q];
                    acc[a] += vals[b] * v;
                    if a != b {
                        acc[b] += vals[a] * v;
                    }
                }
            }
            let mut diag = 1.0 / (lii * lii);
            for a in 0..rows.len() {
                let v = -acc[a] / lii;
                sigma[p0 + a] = v;
                diag -= vals[a] * v / lii;
            }
            sigma[lp[i]] = diag;
        }
        let mut diag = vec![0.0; s.n];
        for (k, &p) in s.perm.iter().enumerate() {
            diag[p] = sigma[lp[k]];
        }
        diag
    }
}

/// Draws `n_samples` vectors `mean + Pᵀ L⁻ᵀ z` with z standard normal from a
/// ChaCha20 stream seeded by `seed`.
pub fn sample_gmrf(
    factor: &CholeskyFactor,
    mean: &[f64],
    seed: u64,
    n_samples: usize,
) -> Result<Vec<Vec<f64>>, SparseError> {
    factor.check_len(mean.len())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = factor.dim();
    let mut z = vec![0.0; n];
    (0..n_samples)
        .map(|_| {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let mut x = factor.apply_inverse_root_t(&z)?;
            x.iter_mut().zip(mean).for_each(|(xi, mi)| *xi += mi);
            Ok(x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletMatrix;
    use nalgebra::DMatrix;

    fn tridiag(n: usize, d: f64, o: f64) -> SparseMatrix {
        let mut t = TripletMatrix::new(n, n);
        for i in 0..n {
            t.push(i, i, d);
            if i + 1 < n {
                t.push_sym(i, i + 1, o);
            }
        }
        t.to_csc()
    }

    #[test]
    fn identity_factor() {
        let f = cholesky(&SparseMatrix::identity(3)).unwrap();
        let l = f.lower_factor().to_dense();
        assert_eq!(l, DMatrix::identity(3, 3));
        assert_eq!(f.log_det(), 0.0);
    }

    #[test]
    fn two_by_two() {
        let q = tridiag(2, 2.0, -1.0);
        let f = cholesky(&q).unwrap();
        assert!((f.log_det() - 3f64.ln()).abs() < 1e-14);
        let x = f.solve(&[1.0, 0.0]).unwrap();
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_rw1_is_rejected() {
        // R_rw1(3)
        let mut t = TripletMatrix::new(3, 3);
        for (i, d) in [1.0, 2.0, 1.0].iter().enumerate() {
            t.push(i, i, *d);
        }
        t.push_sym(0, 1, -1.0);
        t.push_sym(1, 2, -1.0);
        let r = t.to_csc();
        assert!(matches!(cholesky(&r), Err(SparseError::NotPositiveDefinite { .. })));
        assert!(cholesky(&r.add_diagonal(1e-6)).is_ok());
    }

    #[test]
    fn refactor_rejects_other_pattern() {
        let f = cholesky(&tridiag(4, 3.0, -1.0)).unwrap();
        assert_eq!(
            f.refactor(&SparseMatrix::identity(4)).unwrap_err(),
            SparseError::PatternMismatch
        );
        let g = f.refactor(&tridiag(4, 5.0, 1.0)).unwrap();
        assert!((g.log_det() - tridiag(4, 5.0, 1.0).to_dense().determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_diagonal_matches_dense() {
        let mut t = TripletMatrix::new(6, 6);
        for i in 0..6 {
            t.push(i, i, 4.0 + i as f64);
        }
        for (i, j) in [(0, 3), (1, 4), (2, 5), (0, 5), (3, 4)] {
            t.push_sym(i, j, -1.0);
        }
        let q = t.to_csc();
        let f = cholesky(&q).unwrap();
        let inv = q.to_dense().try_inverse().unwrap();
        for (i, d) in f.inverse_diagonal().into_iter().enumerate() {
            assert!((d - inv[(i, i)]).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_many_matches_single() {
        let q = tridiag(5, 3.0, -1.0);
        let f = cholesky(&q).unwrap();
        let mut block: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let expect: Vec<f64> = block.chunks(5).flat_map(|c| f.solve(c).unwrap()).collect();
        f.solve_many(&mut block).unwrap();
        assert_eq!(block, expect);
    }

    #[test]
    fn dimension_checks() {
        let f = cholesky(&SparseMatrix::identity(4)).unwrap();
        assert!(matches!(f.solve(&[1.0]), Err(SparseError::DimensionMismatch { .. })));
        assert!(matches!(
            sample_gmrf(&f, &[0.0; 3], 1, 1),
            Err(SparseError::DimensionMismatch { .. })
        ));
    }
}
