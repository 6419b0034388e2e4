//! Small dense helpers for constraint systems and Gram matrices.

use nalgebra::{DMatrix, SymmetricEigen};

/// Rank of a symmetric PSD matrix by diagonally pivoted Cholesky.
///
/// A pivot is accepted while it exceeds `rel_tol · max(diag)`.
pub fn psd_rank(gram: &DMatrix<f64>, rel_tol: f64) -> usize {
    let n = gram.nrows();
    let scale = (0..n).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return 0;
    }
    // pivoted Cholesky, pivots swapped to the front so the trailing block
    // stays contiguous; only the lower triangle is kept current
    let mut m = gram.as_slice().to_vec();
    for r in 0..n {
        let (p, val) = (r..n)
            .map(|i| (i, m[i * n + i]))
            .fold((r, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if val <= rel_tol * scale {
            return r;
        }
        if p != r {
            swap_symmetric(&mut m, n, r, p);
        }
        let root = val.sqrt();
        for i in r..n {
            m[r * n + i] /= root;
        }
        for j in r + 1..n {
            let cj = m[r * n + j];
            if cj == 0.0 {
                continue;
            }
            let (head, tail) = m.split_at_mut(j * n);
            let pivot_col = &head[r * n..r * n + n];
            let column = &mut tail[..n];
            for i in j..n {
                column[i] -= pivot_col[i] * cj;
            }
        }
    }
    n
}

/// Swaps rows/columns a < b of a symmetric column-major matrix whose lower
/// triangle is current.
fn swap_symmetric(m: &mut [f64], n: usize, a: usize, b: usize) {
    let at = |i: usize, j: usize| if i >= j { j * n + i } else { i * n + j };
    for k in 0..n {
        if k == a || k == b {
            continue;
        }
        let (x, y) = (at(a, k), at(b, k));
        m.swap(x, y);
    }
    m.swap(a * n + a, b * n + b);
}

pub fn row_rank(rows: &[Vec<f64>], rel_tol: f64) -> usize {
    psd_rank(&gram(rows), rel_tol)
}

/// G = R Rᵀ for dense rows.
pub fn gram(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows.len();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Modified Gram-Schmidt on `rows` against an existing orthonormal `basis`.
///
/// Rows whose residual norm falls below `drop_tol` (relative to the row's
/// original norm) are discarded; the survivors are normalised and returned
/// together with the indices of the input rows they came from.
pub fn orthonormalize_against(
    basis: &[Vec<f64>],
    rows: &[Vec<f64>],
    drop_tol: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (idx, row) in rows.iter().enumerate() {
        let norm0 = dot(row, row).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut r = row.clone();
        // two passes keep the residual orthogonal to working precision
        for _ in 0..2 {
            for q in basis.iter().chain(out.iter()) {
                let c = dot(&r, q);
                if c != 0.0 {
                    r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
                }
            }
        }
        let nr = dot(&r, &r).sqrt();
        if nr > drop_tol * norm0 {
            r.iter_mut().for_each(|v| *v /= nr);
            out.push(r);
            kept.push(idx);
        }
    }
    (out, kept)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Orthonormal basis (as columns) of the complement of the row space of `a`.
pub fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let rows: Vec<Vec<f64>> = (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
    let (row_basis, _) = orthonormalize_against(&[], &rows, 1e-10);
    let units: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let (comp, _) = orthonormalize_against(&row_basis, &units, 1e-8);
    let mut v = DMatrix::zeros(n, comp.len());
    for (j, c) in comp.iter().enumerate() {
        for i in 0..n {
            v[(i, j)] = c[i];
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_dependent_rows() {
        let rows = vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 2.0, 1.0]];
        assert_eq!(row_rank(&rows, 1e-12), 2);
    }

    #[test]
    fn gram_schmidt_drops_redundancy() {
        let basis = vec![vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0]];
        let rows = vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let (out, kept) = orthonormalize_against(&basis, &rows, 1e-10);
        assert_eq!(kept, vec![1]);
        assert!((dot(&out[0], &basis[0])).abs() < 1e-15);
    }

    #[test]
    fn complement_dimension() {
        let a = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let v = null_space_basis(&a);
        assert_eq!(v.ncols(), 3);
        assert!((&a * &v).amax() < 1e-14);
        assert!((v.transpose() * &v - DMatrix::identity(3, 3)).amax() < 1e-14);
    }
}
