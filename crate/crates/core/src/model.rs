//! The latent Gaussian field x = (μ, β, α, γ, δ), its prior precision and
//! the design map from x to the cell-wise linear predictor η.
//!
//! Under the hybrid method the δ block is carried twice: `x` (which enters
//! η) and `x*`, tied by x | x* ~ N(Z x*, κ⁻¹ I) with x* ~ N(0, Q_ε⁻¹).

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::constraints::{
    assemble_joint_precision, build_gc_constraints, log_det_gram_rows, build_sc_constraints, reduce_to_full_rank, split_constraints,
    ConstraintError, ConstraintSet, HymikSplit, SplitPolicy,
};
use crate::likelihood::Family;
use crate::sparse::{SparseMatrix, TripletMatrix};
use crate::structures::{
    build_icar_structure, build_interaction_structure, build_rw_structure, scale_structure, Graph, StructureError,
    StructureMatrix,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kriging,
    Hymik,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionConstraints {
    Gc,
    Sc,
}

/// Vague Gaussian prior precision for the intercept and fixed effects.
pub const FIXED_EFFECT_PRECISION: f64 = 1e-3;
/// ε relative to the geometric mean of a structure's diagonal.
pub const EPS_RELATIVE: f64 = 1e-6;
/// κ relative to the geometric mean of the diagonal of Q_ε at τ = 1.
pub const KAPPA_RELATIVE: f64 = 1e8;
/// Largest block whose eigenvalues are computed densely for the normaliser.
const DENSE_EIGEN_LIMIT: usize = 3000;

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n_t: usize,
    pub temporal_order: usize,
    pub constraints: InteractionConstraints,
    pub method: Method,
    pub split: SplitPolicy,
    /// Scale R_α, R_γ, R_δ to unit geometric-mean marginal variance.
    pub scale: bool,
    /// Baseline only: krige the overdetermined δ system instead of the reduced one.
    pub raw_constraints: bool,
    /// One row per cell (time-major), one column per fixed effect.
    pub covariates: Option<DMatrix<f64>>,
    pub family: Family,
}

impl ModelSpec {
    pub fn new(n_t: usize, constraints: InteractionConstraints, method: Method, family: Family) -> Self {
        Self {
            n_t,
            temporal_order: 2,
            constraints,
            method,
            split: SplitPolicy::Auto,
            scale: false,
            raw_constraints: false,
            covariates: None,
            family,
        }
    }
}

/// Precisions (and the negative-binomial size φ).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparameters {
    pub tau_alpha: f64,
    pub tau_gamma: f64,
    pub tau_delta: f64,
    pub dispersion: f64,
}

impl Hyperparameters {
    pub fn new(tau_alpha: f64, tau_gamma: f64, tau_delta: f64) -> Self {
        Self {
            tau_alpha,
            tau_gamma,
            tau_delta,
            dispersion: 1.0,
        }
    }

    pub fn with_dispersion(mut self, phi: f64) -> Self {
        self.dispersion = phi;
        self
    }

    /// Log-scale coordinates; φ is included only when the family uses it.
    pub fn to_theta(&self, family: Family) -> Vec<f64> {
        let mut t = vec![self.tau_alpha.ln(), self.tau_gamma.ln(), self.tau_delta.ln()];
        if family.has_dispersion() {
            t.push(self.dispersion.ln());
        }
        t
    }

    pub fn from_theta(theta: &[f64], family: Family) -> Self {
        let phi = if family.has_dispersion() { theta[3].exp() } else { 1.0 };
        Self::new(theta[0].exp(), theta[1].exp(), theta[2].exp()).with_dispersion(phi)
    }

    pub fn taus(&self) -> [f64; 3] {
        [self.tau_alpha, self.tau_gamma, self.tau_delta]
    }
}

/// Log-gamma prior on each log-precision, flat prior on log φ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperprior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for Hyperprior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 5e-5 }
    }
}

impl Hyperprior {
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let (a, b) = (self.shape, self.rate);
        theta
            .iter()
            .take(3)
            .map(|&t| a * b.ln() - ln_gamma(a) + a * t - b * t.exp())
            .sum()
    }
}

/// Column offsets of the blocks of x.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_fixed: usize,
    pub alpha: usize,
    pub gamma: usize,
    /// The δ values that enter η (x under the hybrid method).
    pub delta: usize,
    /// x* under the hybrid method.
    pub delta_star: Option<usize>,
    pub dim: usize,
}

/// A τ-scaled intrinsic block and what its normaliser needs.
#[derive(Debug, Clone)]
pub struct RandomBlock {
    pub structure: StructureMatrix,
    pub eps: f64,
    /// Nonzero eigenvalues of R, if small enough to compute.
    pub eigenvalues: Option<Vec<f64>>,
    /// Null directions of R left without a constraint (prior precision ε).
    pub uncovered: usize,
}

impl RandomBlock {
    fn new(structure: StructureMatrix, eigenvalues: Option<Vec<f64>>, covered: usize) -> Self {
        let diag = structure.matrix.diagonal();
        let eps = EPS_RELATIVE * geometric_mean(&diag);
        let uncovered = structure.rank_deficiency.saturating_sub(covered);
        Self {
            structure,
            eps,
            eigenvalues,
            uncovered,
        }
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    /// log det of τR + εI on the constraint complement, minus log |R|₊.
    fn log_normaliser(&self, tau: f64) -> f64 {
        let range = match &self.eigenvalues {
            Some(ev) => ev.iter().map(|&l| (tau * l + self.eps).ln() - l.ln()).sum(),
            None => self.structure.rank() as f64 * tau.ln(),
        };
        range + self.uncovered as f64 * self.eps.ln()
    }

    /// log |R|₊ (product of the nonzero eigenvalues).
    pub fn log_pdet(&self) -> Option<f64> {
        self.eigenvalues.as_ref().map(|ev| ev.iter().map(|l| l.ln()).sum())
    }
}

pub(crate) fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Fixed sparsity pattern of Q̃ = Q(θ) + 𝒜ᵀ diag(c) 𝒜 and the maps that fill it.
#[derive(Debug, Clone)]
struct Assembly {
    pattern: SparseMatrix,
    constant: Vec<f64>,
    tau_maps: [Vec<(usize, f64)>; 3],
    /// (position, cell, coefficient) for the data term.
    data_map: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct LatentModel {
    pub spec: ModelSpec,
    pub n_t: usize,
    pub n_s: usize,
    pub n_covariates: usize,
    pub layout: Layout,
    pub alpha: RandomBlock,
    pub gamma: RandomBlock,
    pub delta: RandomBlock,
    /// The δ constraint system (reduced unless `raw_constraints`).
    pub delta_constraints: ConstraintSet,
    pub split: Option<HymikSplit>,
    pub kappa: f64,
    /// Every constraint handled by kriging, over the full latent vector.
    pub kriged: SparseMatrix,
    /// log |K Kᵀ| for the kriged rows K (absent for the overdetermined system).
    pub log_det_kriged_gram: Option<f64>,
    /// Constraints on the reported vector (μ, β, α, γ, δ): main effects and the full δ set.
    pub reported_constraints: SparseMatrix,
    /// Rows = cells (time-major), columns = latent vector.
    pub design: SparseMatrix,
    assembly: Assembly,
}

impl LatentModel {
    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn n_cells(&self) -> usize {
        self.n_t * self.n_s
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    /// Length of the reported vector (μ, β, α, γ, δ).
    pub fn reported_dim(&self) -> usize {
        self.layout.delta + self.n_cells()
    }

    /// Drops x* so both methods report on the same layout.
    pub fn reported<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.reported_dim()]
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.design.mul_vec(x)
    }

    /// Block-diagonal prior precision.
    pub fn prior_precision(&self, h: &Hyperparameters) -> SparseMatrix {
        let lay = &self.layout;
        let mut t = TripletMatrix::new(lay.dim, lay.dim);
        for i in 0..lay.n_fixed {
            t.push(i, i, FIXED_EFFECT_PRECISION);
        }
        for (block, off, tau) in [
            (&self.alpha, lay.alpha, h.tau_alpha),
            (&self.gamma, lay.gamma, h.tau_gamma),
        ] {
            t.push_block(off, off, &block.structure.matrix, tau);
            for i in 0..block.dim() {
                t.push(off + i, off + i, block.eps);
            }
        }
        let q_eps = self.delta.structure.matrix.scale(h.tau_delta).add_diagonal(self.delta.eps);
        match (&self.split, lay.delta_star) {
            (Some(split), Some(_)) => {
                let qj = assemble_joint_precision(&split.z, &q_eps, self.kappa).expect("consistent dimensions");
                t.push_block(lay.delta, lay.delta, &qj, 1.0);
            }
            _ => t.push_block(lay.delta, lay.delta, &q_eps, 1.0),
        }
        t.to_csc()
    }

    /// xᵀ Q(θ) x without forming Q.
    pub fn prior_quadratic(&self, h: &Hyperparameters, x: &[f64]) -> f64 {
        let lay = &self.layout;
        let fixed: f64 = x[..lay.n_fixed].iter().map(|v| v * v).sum::<f64>() * FIXED_EFFECT_PRECISION;
        let quad = |b: &RandomBlock, tau: f64, v: &[f64]| -> f64 {
            let rv = b.structure.matrix.mul_vec(v);
            tau * crate::dense::dot(v, &rv) + b.eps * crate::dense::dot(v, v)
        };
        let n = self.n_cells();
        let a = quad(&self.alpha, h.tau_alpha, &x[lay.alpha..lay.alpha + self.n_t]);
        let g = quad(&self.gamma, h.tau_gamma, &x[lay.gamma..lay.gamma + self.n_s]);
        let d = match (&self.split, lay.delta_star) {
            (Some(split), Some(ds)) => {
                let xs = &x[ds..ds + n];
                let zx = split.z.mul_vec(xs);
                let tie: f64 = x[lay.delta..lay.delta + n].iter().zip(&zx).map(|(u, v)| (u - v) * (u - v)).sum();
                let off: f64 = split.a1.mul_vec(xs).iter().map(|v| v * v).sum();
                self.kappa * (tie + off) + quad(&self.delta, h.tau_delta, xs)
            }
            _ => quad(&self.delta, h.tau_delta, &x[lay.delta..lay.delta + n]),
        };
        fixed + a + g + d
    }

    /// ½ log det of the prior precision restricted to the constraint
    /// surface, with the structure-matrix terms ½ log |R|₊ left out.
    pub fn prior_log_normaliser(&self, h: &Hyperparameters) -> f64 {
        let fixed = self.layout.n_fixed as f64 * FIXED_EFFECT_PRECISION.ln();
        let mut total = fixed + self.alpha.log_normaliser(h.tau_alpha) + self.gamma.log_normaliser(h.tau_gamma);
        total += self.delta.log_normaliser(h.tau_delta);
        if let Some(split) = &self.split {
            // x | x* adds n log κ; the A₁ null directions of x* carry κ + ε
            total += self.n_cells() as f64 * self.kappa.ln();
            total += split.k1() as f64 * ((self.kappa + self.delta.eps).ln() - self.delta.eps.ln());
        }
        0.5 * total
    }

    /// ½ Σ log |R|₊ over the intrinsic blocks (added back after fitting).
    pub fn structure_log_pdet(&self) -> Option<f64> {
        Some(0.5 * (self.alpha.log_pdet()? + self.gamma.log_pdet()? + self.delta.log_pdet()?))
    }

    /// Q̃ = Q(θ) + 𝒜ᵀ diag(c) 𝒜 on the fixed pattern (same pattern for every call).
    pub fn posterior_precision(&self, h: &Hyperparameters, c: &[f64]) -> SparseMatrix {
        let asm = &self.assembly;
        let mut q = asm.pattern.clone();
        let vals = q.values_mut();
        vals.copy_from_slice(&asm.constant);
        for (map, tau) in asm.tau_maps.iter().zip(h.taus()) {
            for &(p, v) in map {
                vals[p] += tau * v;
            }
        }
        for &(p, cell, coef) in &asm.data_map {
            vals[p] += c[cell] * coef;
        }
        q
    }
}

/// Wires structures, constraints, the design and the precision pattern.
pub fn build_latent_model(graph: &Graph, spec: ModelSpec) -> Result<LatentModel, ModelError> {
    let n_t = spec.n_t;
    let n_s = graph.n_nodes();
    let n = n_t * n_s;
    let p = match &spec.covariates {
        Some(u) if u.nrows() != n => {
            return Err(ModelError::DimensionMismatch(format!(
                "covariates have {} rows, expected {n}",
                u.nrows()
            )))
        }
        Some(u) => u.ncols(),
        None => 0,
    };
    if spec.constraints == InteractionConstraints::Sc && spec.temporal_order != 2 {
        return Err(ModelError::Unsupported(
            "SC constraints assume a second-order random walk in time".into(),
        ));
    }
    if spec.raw_constraints && spec.method == Method::Hymik {
        return Err(ModelError::Unsupported(
            "the overdetermined constraint system is only available for kriging".into(),
        ));
    }

    let mut r_alpha = build_rw_structure(n_t, spec.temporal_order)?;
    let mut r_gamma = build_icar_structure(graph)?;
    if spec.scale {
        let null_alpha = if spec.temporal_order == 2 {
            ConstraintSet::sum_and_trend(n_t)
        } else {
            ConstraintSet::sum_to_zero(n_t)
        };
        r_alpha = scale_structure(&r_alpha, &null_alpha)?;
        r_gamma = scale_structure(&r_gamma, &ConstraintSet::sum_to_zero(n_s))?;
    }
    // the constrained covariance of a Kronecker product is the product of
    // the factors' covariances, so its scale is the product of their scales
    let r_delta = build_interaction_structure(&r_alpha, &r_gamma);

    let ev_alpha = (n_t <= DENSE_EIGEN_LIMIT).then(|| r_alpha.nonzero_eigenvalues());
    let ev_gamma = (n_s <= DENSE_EIGEN_LIMIT).then(|| r_gamma.nonzero_eigenvalues());
    let ev_delta = match (&ev_alpha, &ev_gamma) {
        (Some(a), Some(g)) => Some(a.iter().flat_map(|&l| g.iter().map(move |&m| l * m)).collect()),
        _ => None,
    };

    let full = match spec.constraints {
        InteractionConstraints::Gc => build_gc_constraints(n_t, n_s)?,
        InteractionConstraints::Sc => build_sc_constraints(n_t, n_s)?,
    };
    let reduced = reduce_to_full_rank(&full)?;
    let sc_trend = spec.constraints == InteractionConstraints::Sc && spec.temporal_order == 2;
    let alpha_rows = if sc_trend { 2 } else { 1 };

    let alpha = RandomBlock::new(r_alpha, ev_alpha, alpha_rows);
    let gamma = RandomBlock::new(r_gamma, ev_gamma, 1);

    let n_fixed = 1 + p;
    let a_off = n_fixed;
    let g_off = a_off + n_t;
    let d_off = g_off + n_s;
    let (split, delta_star, dim) = match spec.method {
        Method::Kriging => (None, None, d_off + n),
        Method::Hymik => {
            let s = split_constraints(&reduced, n_t, n_s, spec.split)?;
            (Some(s), Some(d_off + n), d_off + 2 * n)
        }
    };
    let layout = Layout {
        n_fixed,
        alpha: a_off,
        gamma: g_off,
        delta: d_off,
        delta_star,
        dim,
    };

    let covered_delta = match &split {
        Some(s) => s.k2(),
        None => reduced.n_rows(),
    };
    let delta = RandomBlock::new(r_delta, ev_delta, covered_delta);
    let kappa = if split.is_some() {
        let qd: Vec<f64> = delta.structure.matrix.diagonal().iter().map(|d| d + delta.eps).collect();
        KAPPA_RELATIVE * geometric_mean(&qd)
    } else {
        0.0
    };

    // main-effect constraints are always kriged
    let mut main = TripletMatrix::new(alpha_rows + 1, dim);
    for t in 0..n_t {
        main.push(0, a_off + t, 1.0);
        if sc_trend {
            main.push(1, a_off + t, (t + 1) as f64);
        }
    }
    for s in 0..n_s {
        main.push(alpha_rows, g_off + s, 1.0);
    }
    let main = main.to_csc();
    let delta_constraints = if spec.raw_constraints { full } else { reduced.clone() };
    let kriged_delta = match &split {
        Some(s) => s.a2.embed_cols(d_off, dim),
        None => delta_constraints.matrix().embed_cols(d_off, dim),
    };
    let kriged = SparseMatrix::vstack(&[&main, &kriged_delta]);
    let log_det_kriged_gram = if spec.raw_constraints {
        None
    } else {
        Some(log_det_gram_rows(&kriged, None)?)
    };
    let rep_dim = d_off + n;
    let reported_constraints = SparseMatrix::vstack(&[
        &main.select_cols_prefix(rep_dim),
        &reduced.matrix().embed_cols(d_off, rep_dim),
    ]);

    let mut dt = TripletMatrix::with_capacity(n, dim, n * (4 + p));
    for t in 0..n_t {
        for s in 0..n_s {
            let i = t * n_s + s;
            dt.push(i, 0, 1.0);
            if let Some(u) = &spec.covariates {
                for j in 0..p {
                    if u[(i, j)] != 0.0 {
                        dt.push(i, 1 + j, u[(i, j)]);
                    }
                }
            }
            dt.push(i, a_off + t, 1.0);
            dt.push(i, g_off + s, 1.0);
            dt.push(i, d_off + i, 1.0);
        }
    }
    let design = dt.to_csc();

    let assembly = build_assembly(&layout, &alpha, &gamma, &delta, split.as_ref(), kappa, &design, n);
    Ok(LatentModel {
        spec,
        n_t,
        n_s,
        n_covariates: p,
        layout,
        alpha,
        gamma,
        delta,
        delta_constraints,
        split,
        kappa,
        kriged,
        log_det_kriged_gram,
        reported_constraints,
        design,
        assembly,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_assembly(
    lay: &Layout,
    alpha: &RandomBlock,
    gamma: &RandomBlock,
    delta: &RandomBlock,
    split: Option<&HymikSplit>,
    kappa: f64,
    design: &SparseMatrix,
    n: usize,
) -> Assembly {
    let dim = lay.dim;
    // tag each triplet with where its value comes from
    enum Src {
        Const(f64),
        Tau(usize, f64),
        Data(usize, f64),
    }
    let mut entries: Vec<(usize, usize, Src)> = Vec::new();
    for i in 0..lay.n_fixed {
        entries.push((i, i, Src::Const(FIXED_EFFECT_PRECISION)));
    }
    let star = lay.delta_star.unwrap_or(lay.delta);
    for (k, (b, off)) in [(alpha, lay.alpha), (gamma, lay.gamma), (delta, star)].into_iter().enumerate() {
        for (i, j, v) in b.structure.matrix.iter() {
            entries.push((off + i, off + j, Src::Tau(k, v)));
        }
        for i in 0..b.dim() {
            entries.push((off + i, off + i, Src::Const(b.eps)));
        }
    }
    if let Some(s) = split {
        for i in 0..n {
            entries.push((lay.delta + i, lay.delta + i, Src::Const(kappa)));
        }
        for (i, j, v) in s.z.iter() {
            entries.push((lay.delta + i, star + j, Src::Const(-kappa * v)));
            entries.push((star + i, lay.delta + j, Src::Const(-kappa * v)));
        }
        for i in 0..n {
            entries.push((star + i, star + i, Src::Const(kappa)));
        }
    }
    let rows = design.transpose();
    for cell in 0..design.nrows() {
        let (cols, vals) = rows.col(cell);
        for (&j, &vj) in cols.iter().zip(vals) {
            for (&k, &vk) in cols.iter().zip(vals) {
                entries.push((j, k, Src::Data(cell, vj * vk)));
            }
        }
    }
    let mut t = TripletMatrix::with_capacity(dim, dim, entries.len());
    for (i, j, _) in &entries {
        t.push(*i, *j, 0.0);
    }
    let pattern = t.to_csc();
    let mut constant = vec![0.0; pattern.nnz()];
    let mut tau_maps: [Vec<(usize, f64)>; 3] = Default::default();
    let mut data_map = Vec::new();
    for (i, j, src) in entries {
        let p = pattern.position(i, j).expect("entry in pattern");
        match src {
            Src::Const(v) => constant[p] += v,
            Src::Tau(k, v) => tau_maps[k].push((p, v)),
            Src::Data(cell, v) => data_map.push((p, cell, v)),
        }
    }
    Assembly {
        pattern,
        constant,
        tau_maps,
        data_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::cholesky;

    fn toy(method: Method, constraints: InteractionConstraints) -> LatentModel {
        let mut spec = ModelSpec::new(3, constraints, method, Family::Poisson);
        spec.temporal_order = if constraints == InteractionConstraints::Sc { 2 } else { 1 };
        build_latent_model(&Graph::path(2), spec).unwrap()
    }

    #[test]
    fn dimensions() {
        let m = toy(Method::Kriging, InteractionConstraints::Gc);
        assert_eq!(m.dim(), 1 + 3 + 2 + 6);
        let m = toy(Method::Hymik, InteractionConstraints::Gc);
        assert_eq!(m.dim(), 1 + 3 + 2 + 12);
        assert_eq!(m.reported_dim(), 12);
    }

    #[test]
    fn design_matches_loop() {
        let g = Graph::path(4);
        let mut spec = ModelSpec::new(3, InteractionConstraints::Gc, Method::Hymik, Family::Poisson);
        spec.covariates = Some(DMatrix::from_fn(12, 2, |i, j| (i * 3 + j) as f64 * 0.1));
        let m = build_latent_model(&g, spec).unwrap();
        let x: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 1.3).sin()).collect();
        let eta = m.eta(&x);
        let lay = m.layout;
        for t in 0..3 {
            for s in 0..4 {
                let i = t * 4 + s;
                let u = (0..2).map(|j| (i * 3 + j) as f64 * 0.1 * x[1 + j]).sum::<f64>();
                let e = x[0] + u + x[lay.alpha + t] + x[lay.gamma + s] + x[lay.delta + i];
                assert!((eta[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_blocks_and_scaling() {
        let m = toy(Method::Kriging, InteractionConstraints::Gc);
        let h = Hyperparameters::new(1.0, 1.0, 1.0);
        let q = m.prior_precision(&h).to_dense();
        assert_eq!(q[(0, 0)], FIXED_EFFECT_PRECISION);
        let ra = m.alpha.structure.matrix.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let e = ra[(i, j)] + if i == j { m.alpha.eps } else { 0.0 };
                assert_eq!(q[(1 + i, 1 + j)], e);
            }
        }
        let q2 = m.prior_precision(&Hyperparameters::new(1.0, 1.0, 2.0)).to_dense();
        let lay = m.layout;
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                let in_delta = i >= lay.delta && j >= lay.delta;
                if !in_delta {
                    assert_eq!(q[(i, j)], q2[(i, j)]);
                } else if i != j {
                    assert_eq!(q2[(i, j)], 2.0 * q[(i, j)]);
                } else {
                    assert!((q2[(i, j)] - m.delta.eps - 2.0 * (q[(i, j)] - m.delta.eps)).abs() < 1e-14);
                }
            }
        }
        let chol = cholesky(&m.prior_precision(&h)).unwrap();
        assert!((chol.log_det() - q.determinant().ln()).abs() < 1e-8);
    }

    #[test]
    fn quadratic_form_and_assembly_agree_with_matrices() {
        for method in [Method::Kriging, Method::Hymik] {
            let m = toy(method, InteractionConstraints::Sc);
            let h = Hyperparameters::new(2.0, 0.5, 3.0);
            let q = m.prior_precision(&h);
            let x: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 0.37).cos()).collect();
            let direct = crate::dense::dot(&x, &q.mul_vec(&x));
            assert!((m.prior_quadratic(&h, &x) - direct).abs() < 1e-6 * direct.abs().max(1.0));
            let c: Vec<f64> = (0..m.n_cells()).map(|i| 1.0 + i as f64).collect();
            let qt = m.posterior_precision(&h, &c).to_dense();
            let ad = m.design.to_dense();
            let expect = q.to_dense() + ad.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(c)) * ad;
            assert!((qt - expect).amax() < 1e-6);
        }
    }

    #[test]
    fn eliminating_the_tie_recovers_q_eps_off_a1() {
        let m = toy(Method::Hymik, InteractionConstraints::Gc);
        let h = Hyperparameters::new(1.0, 1.0, 1.5);
        let q = m.prior_precision(&h).to_dense();
        let (d, ds, n) = (m.layout.delta, m.layout.delta_star.unwrap(), m.n_cells());
        let qxx = q.view((d, d), (n, n)).into_owned();
        let qsx = q.view((ds, d), (n, n)).into_owned();
        let qss = q.view((ds, ds), (n, n)).into_owned();
        let schur = &qss - &qsx * qxx.try_inverse().unwrap() * qsx.transpose();
        // Q_ε plus κ A₁ᵀA₁ on directions that x never sees
        let a1 = m.split.as_ref().unwrap().a1.to_dense();
        let q_eps = m.delta.structure.matrix.scale(1.5).add_diagonal(m.delta.eps).to_dense();
        let expect = &q_eps + a1.transpose() * &a1 * m.kappa;
        assert!((&schur - &expect).amax() < 1e-6 * q_eps.amax());
        let zd = m.split.as_ref().unwrap().z.to_dense();
        assert!((&zd * (&schur - &q_eps) * &zd).amax() < 1e-6 * q_eps.amax());
    }

    #[test]
    fn sc_needs_rw2() {
        let mut spec = ModelSpec::new(4, InteractionConstraints::Sc, Method::Kriging, Family::Poisson);
        spec.temporal_order = 1;
        assert!(matches!(build_latent_model(&Graph::path(3), spec), Err(ModelError::Unsupported(_))));
    }

    #[test]
    fn hyperprior_is_log_gamma() {
        let hp = Hyperprior::default();
        // Gamma(1, b) on τ, expressed on θ = log τ: log b + θ − b e^θ
        let th = [0.7];
        assert!((hp.log_density(&th) - (5e-5f64.ln() + 0.7 - 5e-5 * 0.7f64.exp())).abs() < 1e-12);
    }
}
