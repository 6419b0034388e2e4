//! Observation models and their second-order expansion around η.
//!
//! Replicated observations of a cell are aggregated: every replicate shares
//! the cell's linear predictor, so g, its derivative and curvature are sums.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("non-finite linear predictor at cell {0}")]
    NonFiniteEta(usize),
    #[error("dispersion must be positive and finite, got {0}")]
    InvalidDispersion(f64),
    #[error("observation {index}: {message}")]
    InvalidObservation { index: usize, message: String },
    #[error("expected {expected} cells, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    NegBinom,
    /// Gaussian response with known precision; used for exactness checks.
    Gaussian { precision: f64 },
}

impl Family {
    pub fn has_dispersion(&self) -> bool {
        matches!(self, Family::NegBinom)
    }

    /// Curvature does not depend on η, so one Newton step is exact.
    pub fn is_quadratic(&self) -> bool {
        matches!(self, Family::Gaussian { .. })
    }
}

/// Per-cell data: cell i holds replicates `values[start[i]..start[i+1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub family: Family,
    pub exposure: Vec<f64>,
    start: Vec<usize>,
    values: Vec<f64>,
    sum_y: Vec<f64>,
    /// Σ of η-independent, φ-independent log terms (Poisson/NegBinom: −log y!).
    base_const: f64,
}

/// Floor applied to the curvature so Q̃ stays positive definite.
pub const CURVATURE_FLOOR: f64 = 1e-12;

impl ObservationSet {
    /// `replicates[i]` lists the observations of cell i.
    pub fn new(family: Family, replicates: Vec<Vec<f64>>, exposure: Vec<f64>) -> Result<Self, LikelihoodError> {
        if replicates.len() != exposure.len() {
            return Err(LikelihoodError::DimensionMismatch {
                expected: replicates.len(),
                found: exposure.len(),
            });
        }
        let mut start = Vec::with_capacity(replicates.len() + 1);
        let mut values = Vec::new();
        start.push(0);
        for (i, cell) in replicates.iter().enumerate() {
            if cell.is_empty() {
                return Err(LikelihoodError::InvalidObservation {
                    index: i,
                    message: "cell has no observations".into(),
                });
            }
            if !(exposure[i] > 0.0 && exposure[i].is_finite()) {
                return Err(LikelihoodError::InvalidObservation {
                    index: i,
                    message: format!("exposure must be positive, got {}", exposure[i]),
                });
            }
            for &y in cell {
                let counting = !matches!(family, Family::Gaussian { .. });
                if !y.is_finite() || (counting && (y < 0.0 || y.fract() != 0.0)) {
                    return Err(LikelihoodError::InvalidObservation {
                        index: i,
                        message: format!("invalid observation {y}"),
                    });
                }
                values.push(y);
            }
            start.push(values.len());
        }
        if let Family::Gaussian { precision } = family {
            if !(precision > 0.0 && precision.is_finite()) {
                return Err(LikelihoodError::InvalidDispersion(precision));
            }
        }
        let sum_y = (0..replicates.len())
            .map(|i| values[start[i]..start[i + 1]].iter().sum())
            .collect();
        let base_const = match family {
            Family::Gaussian { precision } => {
                0.5 * values.len() as f64 * (precision.ln() - (2.0 * std::f64::consts::PI).ln())
            }
            _ => -values.iter().map(|&y| ln_gamma(y + 1.0)).sum::<f64>(),
        };
        Ok(Self {
            family,
            exposure,
            start,
            values,
            sum_y,
            base_const,
        })
    }

    /// One observation per cell.
    pub fn single(family: Family, y: Vec<f64>, exposure: Vec<f64>) -> Result<Self, LikelihoodError> {
        Self::new(family, y.into_iter().map(|v| vec![v]).collect(), exposure)
    }

    pub fn n_cells(&self) -> usize {
        self.exposure.len()
    }

    pub fn n_observations(&self) -> usize {
        self.values.len()
    }

    pub fn replicates(&self, cell: usize) -> &[f64] {
        &self.values[self.start[cell]..self.start[cell + 1]]
    }

    pub fn n_replicates(&self, cell: usize) -> usize {
        self.start[cell + 1] - self.start[cell]
    }

    pub fn cell_sum(&self, cell: usize) -> f64 {
        self.sum_y[cell]
    }

    /// Same observations with the cells reordered: new cell i is old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let reps = order.iter().map(|&i| self.replicates(i).to_vec()).collect();
        let exposure = order.iter().map(|&i| self.exposure[i]).collect();
        Self::new(self.family, reps, exposure).expect("permutation of valid data")
    }
}

/// Per-cell log-likelihood g (η-dependent part only), b and c.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorTerms {
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl TaylorTerms {
    /// First derivative of g, recovered as b − c·η.
    pub fn derivative(&self, eta: &[f64]) -> Vec<f64> {
        self.b.iter().zip(&self.c).zip(eta).map(|((b, c), e)| b - c * e).collect()
    }
}

fn check_eta(eta: &[f64], obs: &ObservationSet) -> Result<(), LikelihoodError> {
    if eta.len() != obs.n_cells() {
        return Err(LikelihoodError::DimensionMismatch {
            expected: obs.n_cells(),
            found: eta.len(),
        });
    }
    match eta.iter().position(|e| !e.is_finite()) {
        Some(i) => Err(LikelihoodError::NonFiniteEta(i)),
        None => Ok(()),
    }
}

fn check_phi(obs: &ObservationSet, phi: Option<f64>) -> Result<f64, LikelihoodError> {
    match obs.family {
        Family::NegBinom => {
            let p = phi.unwrap_or(f64::NAN);
            if p > 0.0 && p.is_finite() {
                Ok(p)
            } else {
                Err(LikelihoodError::InvalidDispersion(p))
            }
        }
        _ => Ok(f64::NAN),
    }
}

/// g, b = g' + c·η and c = −g'' per cell (c floored at 1e-12).
///
/// Poisson: g = y·η − E·e^η. NegBinom with size φ and μ = E·e^η:
/// g = y·log μ − (y+φ)·log(μ+φ). Sums over replicates.
pub fn loglik_terms(obs: &ObservationSet, eta: &[f64], phi: Option<f64>) -> Result<TaylorTerms, LikelihoodError> {
    check_eta(eta, obs)?;
    let phi = check_phi(obs, phi)?;
    let n = eta.len();
    let mut g = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let e = eta[i];
        let sy = obs.sum_y[i];
        let r = obs.n_replicates(i) as f64;
        let (gi, di, ci) = match obs.family {
            Family::Poisson => {
                let mu = obs.exposure[i] * e.exp();
                (sy * e - r * mu, sy - r * mu, r * mu)
            }
            Family::NegBinom => {
                let mu = obs.exposure[i] * e.exp();
                let w = sy + r * phi;
                let gi = sy * mu.ln() - w * (mu + phi).ln();
                (gi, sy - w * mu / (mu + phi), w * phi * mu / ((mu + phi) * (mu + phi)))
            }
            Family::Gaussian { precision } => {
                let sq: f64 = obs.replicates(i).iter().map(|y| (y - e) * (y - e)).sum();
                (-0.5 * precision * sq, precision * (sy - r * e), precision * r)
            }
        };
        let ci = ci.max(CURVATURE_FLOOR);
        g.push(gi);
        b.push(di + ci * e);
        c.push(ci);
    }
    Ok(TaylorTerms { g, b, c })
}

/// Full log-likelihood including every normalising constant.
pub fn log_likelihood(obs: &ObservationSet, eta: &[f64], phi: Option<f64>) -> Result<f64, LikelihoodError> {
    check_eta(eta, obs)?;
    let phi = check_phi(obs, phi)?;
    let mut total = obs.base_const;
    for (i, &e) in eta.iter().enumerate() {
        let sy = obs.sum_y[i];
        let r = obs.n_replicates(i) as f64;
        let log_e = obs.exposure[i].ln();
        total += match obs.family {
            Family::Poisson => sy * (e + log_e) - r * obs.exposure[i] * e.exp(),
            Family::NegBinom => {
                let mu = obs.exposure[i] * e.exp();
                let mut v = sy * mu.ln() - (sy + r * phi) * (mu + phi).ln() + r * (phi * phi.ln() - ln_gamma(phi));
                v += obs.replicates(i).iter().map(|&y| ln_gamma(y + phi)).sum::<f64>();
                v
            }
            Family::Gaussian { precision } => {
                -0.5 * precision * obs.replicates(i).iter().map(|y| (y - e) * (y - e)).sum::<f64>()
            }
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> (f64, f64) {
        let (fp, f0, fm) = (f(x + h), f(x), f(x - h));
        ((fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h))
    }

    #[test]
    fn poisson_examples() {
        let obs = ObservationSet::single(Family::Poisson, vec![2.0], vec![1.0]).unwrap();
        let t = loglik_terms(&obs, &[0.0], None).unwrap();
        assert_eq!((t.b[0], t.c[0]), (1.0, 1.0));
        let obs = ObservationSet::single(Family::Poisson, vec![4.0], vec![2.0]).unwrap();
        let eta = 2f64.ln();
        let t = loglik_terms(&obs, &[eta], None).unwrap();
        assert!(t.derivative(&[eta])[0].abs() < 1e-15);
        assert!((t.c[0] - 4.0).abs() < 1e-14);
        assert!((t.b[0] - 4.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn negbinom_matches_finite_differences() {
        let obs = ObservationSet::single(Family::NegBinom, vec![3.0], vec![1.0]).unwrap();
        let g = |e: f64| loglik_terms(&obs, &[e], Some(2.0)).unwrap().g[0];
        let (d1, d2) = fd(g, 0.0, 1e-5);
        let t = loglik_terms(&obs, &[0.0], Some(2.0)).unwrap();
        assert!((t.derivative(&[0.0])[0] - d1).abs() < 1e-6);
        assert!((t.c[0] + d2).abs() < 1e-4);
    }

    #[test]
    fn negbinom_tends_to_poisson() {
        let p = ObservationSet::single(Family::Poisson, vec![5.0], vec![1.5]).unwrap();
        let nb = ObservationSet::single(Family::NegBinom, vec![5.0], vec![1.5]).unwrap();
        let tp = loglik_terms(&p, &[0.3], None).unwrap();
        let tn = loglik_terms(&nb, &[0.3], Some(1e8)).unwrap();
        assert!(((tp.c[0] - tn.c[0]) / tp.c[0]).abs() < 1e-4);
        assert!(((tp.b[0] - tn.b[0]) / tp.b[0]).abs() < 1e-4);
        let lp = log_likelihood(&p, &[0.3], None).unwrap();
        let ln = log_likelihood(&nb, &[0.3], Some(1e8)).unwrap();
        assert!(((lp - ln) / lp).abs() < 1e-4);
    }

    #[test]
    fn full_loglik_is_a_density() {
        // Σ_y exp(loglik) = 1 for a single Poisson / NegBinom cell
        for (fam, phi) in [(Family::Poisson, None), (Family::NegBinom, Some(3.0))] {
            let total: f64 = (0..200)
                .map(|y| {
                    let o = ObservationSet::single(fam, vec![y as f64], vec![2.0]).unwrap();
                    log_likelihood(&o, &[0.4], phi).unwrap().exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "{fam:?} {total}");
        }
    }

    #[test]
    fn replicates_aggregate() {
        let agg = ObservationSet::new(Family::Poisson, vec![vec![1.0, 4.0, 2.0]], vec![1.3]).unwrap();
        let t = loglik_terms(&agg, &[0.2], None).unwrap();
        let mut sum = (0.0, 0.0, 0.0);
        for y in [1.0, 4.0, 2.0] {
            let o = ObservationSet::single(Family::Poisson, vec![y], vec![1.3]).unwrap();
            let ti = loglik_terms(&o, &[0.2], None).unwrap();
            sum = (sum.0 + ti.g[0], sum.1 + ti.b[0], sum.2 + ti.c[0]);
        }
        assert!((t.g[0] - sum.0).abs() < 1e-12 && (t.b[0] - sum.1).abs() < 1e-12 && (t.c[0] - sum.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ObservationSet::single(Family::Poisson, vec![-1.0], vec![1.0]).is_err());
        assert!(ObservationSet::single(Family::Poisson, vec![1.5], vec![1.0]).is_err());
        assert!(ObservationSet::single(Family::Poisson, vec![1.0], vec![0.0]).is_err());
        let o = ObservationSet::single(Family::NegBinom, vec![1.0], vec![1.0]).unwrap();
        assert_eq!(loglik_terms(&o, &[0.0], Some(-1.0)).unwrap_err(), LikelihoodError::InvalidDispersion(-1.0));
        assert_eq!(loglik_terms(&o, &[f64::NAN], Some(1.0)).unwrap_err(), LikelihoodError::NonFiniteEta(0));
    }
}
