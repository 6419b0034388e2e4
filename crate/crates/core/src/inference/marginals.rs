use nalgebra::DMatrix;

use crate::dense::{null_space_basis, symmetric_eigenvalues};
use crate::model::LatentModel;
use crate::sparse::SparseMatrix;
use crate::structures::StructureMatrix;

use super::hyper::HyperGrid;
use super::InferenceError;

/// Mode and marginal variances of one grid point's approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Mixture over grid points with weights exp(log_weight)·Δ.
///
/// Returns (means, sds, number of negative mixture variances clamped to 0).
pub fn latent_marginals(grid: &HyperGrid, points: &[PointSummary]) -> Result<(Vec<f64>, Vec<f64>, usize), InferenceError> {
    if points.len() != grid.points.len() || points.is_empty() {
        return Err(InferenceError::DimensionMismatch {
            expected: grid.points.len(),
            found: points.len(),
        });
    }
    mixture(&grid.probabilities(), points)
}

pub(crate) fn mixture(weights: &[f64], points: &[PointSummary]) -> Result<(Vec<f64>, Vec<f64>, usize), InferenceError> {
    let n = points[0].mean.len();
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (w, p) in weights.iter().zip(points) {
        if p.mean.len() != n || p.variance.len() != n {
            return Err(InferenceError::DimensionMismatch {
                expected: n,
                found: p.mean.len(),
            });
        }
        for i in 0..n {
            mean[i] += w * p.mean[i];
            second[i] += w * (p.variance[i] + p.mean[i] * p.mean[i]);
        }
    }
    let mut clamped = 0;
    let sd = mean
        .iter()
        .zip(&second)
        .map(|(m, s)| {
            let v = s - m * m;
            if v < 0.0 {
                // cancellation in E[x²] − E[x]² for near-deterministic entries
                if v < -1e-12 * s.abs().max(1e-300) {
                    clamped += 1;
                }
                0.0
            } else {
                v.sqrt()
            }
        })
        .collect();
    Ok((mean, sd, clamped))
}

/// Largest complement dimension handled by the dense route.
pub const DENSE_CORRECTION_LIMIT: usize = 6000;

/// log |R|₊ on the complement of the row space of A: log det(VᵀRV) for an
/// orthonormal basis V of that complement, falling back to the product of
/// the nonzero eigenvalues when VᵀRV is singular.
pub fn generalized_log_det(r: &SparseMatrix, a: &SparseMatrix) -> Result<f64, InferenceError> {
    let n = r.nrows();
    let k = a.nrows();
    if n.saturating_sub(k) > DENSE_CORRECTION_LIMIT {
        return Err(InferenceError::TooLargeForExactCorrection { dim: n - k });
    }
    let v = if k == 0 {
        DMatrix::identity(n, n)
    } else {
        null_space_basis(&a.to_dense())
    };
    let m = v.transpose() * r.to_dense() * &v;
    let m = (&m + m.transpose()) * 0.5;
    let scale = m.diagonal().amax();
    if let Some(chol) = m.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        if diag.iter().all(|d| d * d > 1e-10 * scale) {
            return Ok(2.0 * diag.iter().map(|d| d.ln()).sum::<f64>());
        }
    }
    let ev = symmetric_eigenvalues(&m);
    let top = ev.last().copied().unwrap_or(0.0);
    Ok(ev.iter().filter(|&&l| l > 1e-8 * top).map(|l| l.ln()).sum())
}

/// log |R_α ⊗ R_γ|₊ = r_γ·log |R_α|₊ + r_α·log |R_γ|₊.
pub fn kronecker_log_pdet(r_alpha: &StructureMatrix, r_gamma: &StructureMatrix) -> f64 {
    let la: f64 = r_alpha.nonzero_eigenvalues().iter().map(|l| l.ln()).sum();
    let lg: f64 = r_gamma.nonzero_eigenvalues().iter().map(|l| l.ln()).sum();
    r_gamma.rank() as f64 * la + r_alpha.rank() as f64 * lg
}

/// Average marginal log-likelihood per observation, with ½ log |R|₊ for
/// every intrinsic block added back. The second value says whether that
/// correction could be applied.
pub fn corrected_marginal_likelihood(grid: &HyperGrid, model: &LatentModel, n_obs: usize) -> (f64, bool) {
    match model.structure_log_pdet() {
        Some(c) => ((grid.log_evidence + c) / n_obs as f64, true),
        None => (grid.log_evidence / n_obs as f64, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintSet;
    use crate::structures::build_rw_structure;

    #[test]
    fn two_point_mixture() {
        let pts = vec![
            PointSummary {
                mean: vec![1.0],
                variance: vec![0.0],
            },
            PointSummary {
                mean: vec![-1.0],
                variance: vec![0.0],
            },
        ];
        let (m, s, _) = mixture(&[0.5, 0.5], &pts).unwrap();
        assert!(m[0].abs() < 1e-15 && (s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_without_constraints() {
        let r = SparseMatrix::from_diagonal(&[2.0, 3.0, 5.0]);
        let a = SparseMatrix::zeros(0, 3);
        assert!((generalized_log_det(&r, &a).unwrap() - 30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rw1_matches_eigenvalues() {
        let r = build_rw_structure(4, 1).unwrap();
        let expect: f64 = r.nonzero_eigenvalues().iter().map(|l| l.ln()).sum();
        let a = ConstraintSet::sum_to_zero(4);
        assert!((generalized_log_det(&r.matrix, a.matrix()).unwrap() - expect).abs() < 1e-10);
    }
}
