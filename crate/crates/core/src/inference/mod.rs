//! Laplace-type inference: constrained Gaussian approximations of the
//! latent field, a search and integration design over the hyperparameters,
//! and mixture marginals.

mod hyper;
mod marginals;
mod newton;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

pub use hyper::{ccd_design, explore_hyperparameters, GridPoint, HyperGrid};
pub use marginals::{
    corrected_marginal_likelihood, generalized_log_det, kronecker_log_pdet, latent_marginals, PointSummary,
    DENSE_CORRECTION_LIMIT,
};
pub use newton::{gaussian_approximation, log_posterior_theta, Engine, GaussianApprox};

use crate::constraints::ConstraintError;
use crate::likelihood::{LikelihoodError, ObservationSet};
use crate::model::{Hyperparameters, LatentModel, Method};
use crate::sparse::{SparseError, SparseMatrix};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("Newton iteration did not converge in {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("factorisation failed: {0}")]
    FactorizationFailed(#[from] SparseError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("hyperparameter search stalled after {evaluations} evaluations")]
    OptimizerStalled { evaluations: usize },
    #[error("non-finite log posterior")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("observation family differs from the model's")]
    FamilyMismatch,
    #[error("generalized determinant needs a dense {dim}-dimensional complement")]
    TooLargeForExactCorrection { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntStrategy {
    /// Central composite design.
    Ccd,
    /// Regular grid in standardised coordinates.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Settings {
    pub newton_tolerance: f64,
    pub max_newton_iterations: usize,
    pub max_halvings: usize,
    pub optimizer_tolerance: f64,
    pub max_evaluations: usize,
    pub gradient_step: f64,
    /// Largest change of any log-hyperparameter in one search step.
    pub max_step: f64,
    pub hessian_step: f64,
    pub strategy: IntStrategy,
    pub grid_step: f64,
    pub log_weight_cut: f64,
    pub ccd_f0: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            newton_tolerance: 1e-6,
            max_newton_iterations: 50,
            max_halvings: 10,
            optimizer_tolerance: 1e-4,
            max_evaluations: 200,
            gradient_step: 1e-2,
            max_step: 2.0,
            hessian_step: 0.05,
            strategy: IntStrategy::Ccd,
            grid_step: 0.75,
            log_weight_cut: 6.0,
            ccd_f0: 1.1,
        }
    }
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseTimes {
    pub factorization: f64,
    pub kriging: f64,
    pub grid_exploration: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub grid: HyperGrid,
    pub hyper: Vec<Summary>,
    pub fixed: Vec<Summary>,
    /// Over (μ, β, α, γ, δ).
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub avg_marginal_loglik: f64,
    pub corrected: bool,
    /// Largest |a·m| / ‖a‖ over all model constraints a at the reported means m.
    pub max_constraint_violation: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub times: PhaseTimes,
}

/// Largest violation of `a x = 0`, each row normalised to unit length.
pub fn normalized_violation(a: &SparseMatrix, x: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let mut norms = vec![0.0; a.nrows()];
    for (i, _, v) in a.iter() {
        norms[i] += v * v;
    }
    ax.iter()
        .zip(&norms)
        .filter(|(_, n)| **n > 0.0)
        .map(|(v, n)| v.abs() / n.sqrt())
        .fold(0.0, f64::max)
}

/// Full fit: θ search, integration design, per-point approximations and
/// mixture marginals.
pub fn fit(
    model: &LatentModel,
    obs: &ObservationSet,
    settings: Settings,
    init: &Hyperparameters,
) -> Result<Fit, InferenceError> {
    let start = Instant::now();
    let engine = Engine::new(model, obs, settings)?;
    let t_grid = Instant::now();
    let grid = explore_hyperparameters(&engine, init)?;
    let grid_time = t_grid.elapsed().as_secs_f64();
    let family = model.family();
    let rep = model.reported_dim();

    let results: Vec<Result<(PointSummary, bool, usize), InferenceError>> = grid
        .points
        .par_iter()
        .map(|p| {
            let h = Hyperparameters::from_theta(&p.theta, family);
            let ga = engine.gaussian_approximation(&h, Some(&grid.mode_latent))?;
            let (var, clamped) = engine.marginal_variances(&ga);
            Ok((
                PointSummary {
                    mean: ga.mode[..rep].to_vec(),
                    variance: var[..rep].to_vec(),
                },
                ga.converged,
                clamped,
            ))
        })
        .collect();
    let mut points = Vec::with_capacity(results.len());
    let mut warnings = grid.warnings.clone();
    let mut converged = true;
    let mut clamped_total = 0;
    for r in results {
        let (p, ok, clamped) = r?;
        converged &= ok;
        clamped_total += clamped;
        points.push(p);
    }
    if !converged {
        warnings.push("Newton iteration did not converge at some grid points".into());
    }
    let (means, sds, clamped_mix) = latent_marginals(&grid, &points)?;
    if clamped_total + clamped_mix > 0 {
        warnings.push(format!(
            "{} negative variances clamped to zero",
            clamped_total + clamped_mix
        ));
    }

    let probs = grid.probabilities();
    let moment = |f: &dyn Fn(&GridPoint) -> f64| -> (f64, f64) {
        let m: f64 = grid.points.iter().zip(&probs).map(|(p, w)| w * f(p)).sum();
        let s: f64 = grid.points.iter().zip(&probs).map(|(p, w)| w * f(p) * f(p)).sum();
        (m, (s - m * m).max(0.0).sqrt())
    };
    let mut hyper = Vec::new();
    for (i, name) in ["tau_alpha", "tau_gamma", "tau_delta"].into_iter().enumerate() {
        let (mean, sd) = moment(&|p| p.theta[i].exp());
        hyper.push(Summary { name: name.into(), mean, sd });
    }
    if family.has_dispersion() {
        let (mean, sd) = moment(&|p| p.theta[3].exp());
        hyper.push(Summary { name: "phi".into(), mean, sd });
        let (mean, sd) = moment(&|p| (-p.theta[3]).exp());
        hyper.push(Summary {
            name: "inv_phi".into(),
            mean,
            sd,
        });
    }
    let mut fixed = vec![Summary {
        name: "intercept".into(),
        mean: means[0],
        sd: sds[0],
    }];
    for j in 0..model.n_covariates {
        fixed.push(Summary {
            name: format!("beta_{}", j + 1),
            mean: means[1 + j],
            sd: sds[1 + j],
        });
    }

    let (avg_marginal_loglik, corrected) = corrected_marginal_likelihood(&grid, model, obs.n_observations());
    if !corrected {
        warnings.push("structure determinants too large for the exact correction; marginal likelihood uncorrected".into());
    }
    let max_constraint_violation = normalized_violation(&model.reported_constraints, &means);
    let mut times = engine.times();
    times.grid_exploration = grid_time;
    times.total = start.elapsed().as_secs_f64();
    Ok(Fit {
        grid,
        hyper,
        fixed,
        means,
        sds,
        avg_marginal_loglik,
        corrected,
        max_constraint_violation,
        converged,
        warnings,
        times,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentSummary {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Serialisable fit summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PosteriorReport {
    pub config: BTreeMap<String, String>,
    pub method: Method,
    pub constraints: String,
    pub hyper: Vec<Summary>,
    pub fixed: Vec<Summary>,
    pub latent: LatentSummary,
    pub avg_marginal_loglik: f64,
    pub corrected: bool,
    pub converged: bool,
    pub max_constraint_violation: f64,
    pub grid_points: usize,
    pub timings: Option<PhaseTimes>,
    pub warnings: Vec<String>,
}

impl PosteriorReport {
    pub fn from_fit(fit: &Fit, model: &LatentModel, config: BTreeMap<String, String>, with_timings: bool) -> Self {
        let constraints = match model.spec.constraints {
            crate::model::InteractionConstraints::Gc => "gc",
            crate::model::InteractionConstraints::Sc => "sc",
        };
        Self {
            config,
            method: model.method(),
            constraints: constraints.into(),
            hyper: fit.hyper.clone(),
            fixed: fit.fixed.clone(),
            latent: LatentSummary {
                means: fit.means.clone(),
                sds: fit.sds.clone(),
            },
            avg_marginal_loglik: fit.avg_marginal_loglik,
            corrected: fit.corrected,
            converged: fit.converged,
            max_constraint_violation: fit.max_constraint_violation,
            grid_points: fit.grid.points.len(),
            timings: with_timings.then_some(fit.times),
            warnings: fit.warnings.clone(),
        }
    }
}
