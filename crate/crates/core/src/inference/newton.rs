use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::constraints::{log_det_gram_rows, Kriging};
use crate::likelihood::{log_likelihood, loglik_terms, ObservationSet};
use crate::model::{Hyperparameters, Hyperprior, LatentModel};
use crate::sparse::{CholeskyFactor, SparseMatrix, SymbolicCholesky};

use super::{InferenceError, PhaseTimes, Settings};

/// Gaussian approximation of p(x | θ, y) at the constrained mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub hyper: Hyperparameters,
    pub mode: Vec<f64>,
    pub eta: Vec<f64>,
    /// Q̃ = Q(θ) + 𝒜ᵀ diag(c) 𝒜 at the last expansion point.
    pub precision: SparseMatrix,
    pub factor: CholeskyFactor,
    pub kriging: Kriging,
    pub iterations: usize,
    pub converged: bool,
}

/// Shared state for repeated fits of one model to one dataset.
///
/// The sparsity pattern of Q̃ does not depend on θ or on the expansion
/// point, so the ordering and symbolic factorisation are done once.
pub struct Engine<'a> {
    pub model: &'a LatentModel,
    pub obs: &'a ObservationSet,
    pub settings: Settings,
    pub hyperprior: Hyperprior,
    symbolic: Arc<SymbolicCholesky>,
    times: Mutex<PhaseTimes>,
    redundant_gram: Mutex<Option<(Vec<usize>, f64)>>,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a LatentModel, obs: &'a ObservationSet, settings: Settings) -> Result<Self, InferenceError> {
        if obs.n_cells() != model.n_cells() {
            return Err(InferenceError::DimensionMismatch {
                expected: model.n_cells(),
                found: obs.n_cells(),
            });
        }
        if obs.family != model.family() {
            return Err(InferenceError::FamilyMismatch);
        }
        let start = Instant::now();
        let q = model.posterior_precision(&Hyperparameters::new(1.0, 1.0, 1.0), &vec![1.0; model.n_cells()]);
        let symbolic = Arc::new(SymbolicCholesky::analyze(&q)?);
        let times = PhaseTimes {
            factorization: start.elapsed().as_secs_f64(),
            ..PhaseTimes::default()
        };
        Ok(Self {
            model,
            obs,
            settings,
            hyperprior: Hyperprior::default(),
            symbolic,
            times: Mutex::new(times),
            redundant_gram: Mutex::new(None),
        })
    }

    pub fn times(&self) -> PhaseTimes {
        *self.times.lock().expect("timer lock")
    }

    fn add_time(&self, f: impl FnOnce(&mut PhaseTimes)) {
        f(&mut self.times.lock().expect("timer lock"));
    }

    fn objective(&self, h: &Hyperparameters, x: &[f64], eta: &[f64]) -> Result<f64, InferenceError> {
        let t = loglik_terms(self.obs, eta, Some(h.dispersion))?;
        Ok(t.g.iter().sum::<f64>() - 0.5 * self.model.prior_quadratic(h, x))
    }

    fn krige(&self, factor: &CholeskyFactor) -> Result<Kriging, InferenceError> {
        let k = if self.model.spec.raw_constraints {
            Kriging::new_allowing_redundancy(&self.model.kriged, factor)?
        } else {
            Kriging::new(&self.model.kriged, factor)?
        };
        Ok(k)
    }

    /// Damped Newton iteration; every iterate is corrected onto the
    /// kriged constraint surface.
    pub fn gaussian_approximation(
        &self,
        h: &Hyperparameters,
        start: Option<&[f64]>,
    ) -> Result<GaussianApprox, InferenceError> {
        let m = self.model;
        let s = &self.settings;
        let mut x = match start {
            Some(x0) if x0.len() == m.dim() => x0.to_vec(),
            _ => vec![0.0; m.dim()],
        };
        let mut eta = m.eta(&x);
        let mut obj = self.objective(h, &x, &eta)?;
        let mut iterations = 0;
        let mut converged = false;
        let mut last = None;
        while iterations < s.max_newton_iterations {
            iterations += 1;
            let terms = loglik_terms(self.obs, &eta, Some(h.dispersion))?;
            let t0 = Instant::now();
            let q = m.posterior_precision(h, &terms.c);
            let factor = self.symbolic.factor(&q)?;
            let rhs = m.design.tr_mul_vec(&terms.b);
            let x_star = factor.solve(&rhs)?;
            let t1 = Instant::now();
            let kriging = self.krige(&factor)?;
            let x_new = kriging.correct(&m.kriged, &x_star);
            let t2 = Instant::now();
            self.add_time(|p| {
                p.factorization += (t1 - t0).as_secs_f64();
                p.kriging += (t2 - t1).as_secs_f64();
            });
            let quadratic = self.obs.family.is_quadratic();
            let mut step = 1.0;
            let mut cand = x_new.clone();
            let mut cand_eta = m.eta(&cand);
            let mut cand_obj = self.objective(h, &cand, &cand_eta)?;
            let mut halvings = 0;
            while !quadratic && cand_obj < obj - 1e-12 * obj.abs() && halvings < s.max_halvings {
                halvings += 1;
                step *= 0.5;
                cand = x.iter().zip(&x_new).map(|(a, b)| a + step * (b - a)).collect();
                cand_eta = m.eta(&cand);
                cand_obj = self.objective(h, &cand, &cand_eta)?;
            }
            let change = eta.iter().zip(&cand_eta).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            x = cand;
            eta = cand_eta;
            obj = cand_obj;
            last = Some((q, factor, kriging));
            if quadratic || change < s.newton_tolerance {
                converged = true;
                break;
            }
        }
        let (mut precision, mut factor, mut kriging) = last.expect("at least one iteration");
        if !self.obs.family.is_quadratic() {
            // curvature at the mode itself; the loop's last factor belongs to
            // the previous iterate, which puts first-order noise into log|Q|
            let t0 = Instant::now();
            let terms = loglik_terms(self.obs, &eta, Some(h.dispersion))?;
            precision = m.posterior_precision(h, &terms.c);
            factor = self.symbolic.factor(&precision)?;
            let t1 = Instant::now();
            kriging = self.krige(&factor)?;
            let t2 = Instant::now();
            self.add_time(|p| {
                p.factorization += (t1 - t0).as_secs_f64();
                p.kriging += (t2 - t1).as_secs_f64();
            });
        }
        Ok(GaussianApprox {
            hyper: *h,
            mode: x,
            eta,
            precision,
            factor,
            kriging,
            iterations,
            converged,
        })
    }

    /// log p(θ) + log p(x̂ | θ) + log p(y | x̂, θ) − log p̃_G(x̂ | θ, y),
    /// with the structure-matrix normalisers ½ log |R|₊ left out.
    ///
    /// Both densities live on the constraint surface; the approximation's
    /// log-determinant there is log|Q̃| + log|K Q̃⁻¹ Kᵀ| − log|K Kᵀ|.
    pub fn log_posterior_theta(&self, ga: &GaussianApprox) -> Result<f64, InferenceError> {
        let m = self.model;
        let h = &ga.hyper;
        let theta = h.to_theta(m.family());
        let log_kk = match m.log_det_kriged_gram {
            Some(v) => v,
            None => self.redundant_log_det(ga.kriging.kept_rows())?,
        };
        let prior = m.prior_log_normaliser(h) - 0.5 * m.prior_quadratic(h, &ga.mode);
        let lik = log_likelihood(self.obs, &ga.eta, Some(h.dispersion))?;
        let approx = 0.5 * (ga.factor.log_det() + ga.kriging.log_det_gram() - log_kk);
        Ok(self.hyperprior.log_density(&theta) + prior + lik - approx)
    }

    fn redundant_log_det(&self, rows: Option<&[usize]>) -> Result<f64, InferenceError> {
        let key: Vec<usize> = rows.map(|r| r.to_vec()).unwrap_or_default();
        let mut cache = self.redundant_gram.lock().expect("cache lock");
        if let Some((k, v)) = cache.as_ref() {
            if *k == key {
                return Ok(*v);
            }
        }
        let v = log_det_gram_rows(&self.model.kriged, rows)?;
        *cache = Some((key, v));
        Ok(v)
    }

    /// Marginal variances of the constrained approximation: the diagonal
    /// of Q̃⁻¹ (selected inversion) minus the kriging downdate.
    /// Returns the variances and the number clamped at zero.
    pub fn marginal_variances(&self, ga: &GaussianApprox) -> (Vec<f64>, usize) {
        let t0 = Instant::now();
        let diag = ga.factor.inverse_diagonal();
        let t1 = Instant::now();
        let red = ga.kriging.variance_reduction();
        let t2 = Instant::now();
        self.add_time(|p| {
            p.factorization += (t1 - t0).as_secs_f64();
            p.kriging += (t2 - t1).as_secs_f64();
        });
        let mut clamped = 0;
        let v = diag
            .iter()
            .zip(&red)
            .map(|(d, r)| {
                let v = d - r;
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        (v, clamped)
    }
}

/// One-off Gaussian approximation with default settings.
pub fn gaussian_approximation(
    model: &LatentModel,
    h: &Hyperparameters,
    obs: &ObservationSet,
) -> Result<GaussianApprox, InferenceError> {
    Engine::new(model, obs, Settings::default())?.gaussian_approximation(h, None)
}

/// One-off evaluation of the unnormalised log posterior of θ.
pub fn log_posterior_theta(model: &LatentModel, h: &Hyperparameters, obs: &ObservationSet) -> Result<f64, InferenceError> {
    let engine = Engine::new(model, obs, Settings::default())?;
    let ga = engine.gaussian_approximation(h, None)?;
    if !ga.converged {
        return Err(InferenceError::NotConverged { iterations: ga.iterations });
    }
    engine.log_posterior_theta(&ga)
}
