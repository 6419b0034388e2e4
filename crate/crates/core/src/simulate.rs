//! Synthetic space-time count data from scaled, constrained intrinsic priors.
//!
//! Random numbers come from ChaCha20 (`rand_chacha`), seeded with
//! `seed_from_u64`; each effect and the counts use their own derived seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::constraints::{build_sc_constraints, krige_correct, reduce_to_full_rank, ConstraintError, ConstraintSet};
use crate::likelihood::{Family, LikelihoodError, ObservationSet};
use crate::model::{geometric_mean, Hyperparameters, EPS_RELATIVE};
use crate::sparse::{cholesky, sample_gmrf, SparseError};
use crate::structures::{
    build_icar_structure, build_interaction_structure, build_rw_structure, scale_structure, Graph, StructureError,
    StructureMatrix,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub graph: Graph,
    pub n_t: usize,
    pub temporal_order: usize,
    pub taus: Hyperparameters,
    pub intercept: f64,
    pub n_replicates: usize,
    pub seed: u64,
}

impl SimulationConfig {
    /// τ = (50, 10, 17), intercept 1.5, RW2 in time, 30 replicates.
    pub fn new(graph: Graph, n_t: usize, seed: u64) -> Self {
        Self {
            graph,
            n_t,
            temporal_order: 2,
            taus: Hyperparameters::new(50.0, 10.0, 17.0),
            intercept: 1.5,
            n_replicates: 30,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub obs: ObservationSet,
    pub n_t: usize,
    pub n_s: usize,
    pub intercept: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Time-major.
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
    pub seed: u64,
}

/// Draw from N(0, (τR + εI)⁻¹) and krige it onto {A x = 0}.
pub fn sample_constrained_effect(
    r: &StructureMatrix,
    tau: f64,
    constraints: &ConstraintSet,
    seed: u64,
) -> Result<Vec<f64>, SimulationError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SimulationError::InvalidConfig(format!("precision must be positive, got {tau}")));
    }
    let eps = EPS_RELATIVE * geometric_mean(&r.matrix.diagonal());
    let q = r.matrix.scale(tau).add_diagonal(eps);
    let f = cholesky(&q)?;
    let draw = sample_gmrf(&f, &vec![0.0; r.dim()], seed, 1)?.pop().expect("one sample");
    Ok(krige_correct(&draw, constraints.matrix(), &f)?)
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser; keeps the streams of nearby seeds unrelated
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<SimulatedData, SimulationError> {
    if cfg.n_replicates == 0 {
        return Err(SimulationError::InvalidConfig("at least one replicate is needed".into()));
    }
    let n_t = cfg.n_t;
    let n_s = cfg.graph.n_nodes();
    let alpha_constraints = if cfg.temporal_order == 2 {
        ConstraintSet::sum_and_trend(n_t)
    } else {
        ConstraintSet::sum_to_zero(n_t)
    };
    let gamma_constraints = ConstraintSet::sum_to_zero(n_s);
    let r_alpha = scale_structure(&build_rw_structure(n_t, cfg.temporal_order)?, &alpha_constraints)?;
    let r_gamma = scale_structure(&build_icar_structure(&cfg.graph)?, &gamma_constraints)?;
    let r_delta = build_interaction_structure(&r_alpha, &r_gamma);
    // SC covers the null space of R_δ only for a second-order walk; with a
    // first-order walk the GC set does
    let delta_constraints = if cfg.temporal_order == 2 {
        reduce_to_full_rank(&build_sc_constraints(n_t, n_s)?)?
    } else {
        reduce_to_full_rank(&crate::constraints::build_gc_constraints(n_t, n_s)?)?
    };

    let alpha = sample_constrained_effect(&r_alpha, cfg.taus.tau_alpha, &alpha_constraints, derived_seed(cfg.seed, 1))?;
    let gamma = sample_constrained_effect(&r_gamma, cfg.taus.tau_gamma, &gamma_constraints, derived_seed(cfg.seed, 2))?;
    let delta = sample_constrained_effect(&r_delta, cfg.taus.tau_delta, &delta_constraints, derived_seed(cfg.seed, 3))?;

    let mut eta = Vec::with_capacity(n_t * n_s);
    for t in 0..n_t {
        for s in 0..n_s {
            eta.push(cfg.intercept + alpha[t] + gamma[s] + delta[t * n_s + s]);
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derived_seed(cfg.seed, 4));
    let mut counts = Vec::with_capacity(eta.len());
    for &e in &eta {
        let pois = Poisson::new(e.exp()).map_err(|err| SimulationError::InvalidConfig(err.to_string()))?;
        counts.push((0..cfg.n_replicates).map(|_| pois.sample(&mut rng)).collect());
    }
    let obs = ObservationSet::new(Family::Poisson, counts, vec![1.0; eta.len()])?;
    Ok(SimulatedData {
        obs,
        n_t,
        n_s,
        intercept: cfg.intercept,
        alpha,
        gamma,
        delta,
        eta,
        seed: cfg.seed,
    })
}
