//! Linear constraint systems on the space-time interaction, their split into
//! an orthonormal block absorbed by a projection (the mixed-effect part) and
//! a remainder handled by conditioning by kriging.
//!
//! Interaction vectors are laid out time-major: index `t * n_s + s`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

use crate::dense::{dot, gram, psd_rank};
use crate::sparse::{CholeskyFactor, SparseError, SparseMatrix, TripletMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("constraint system has rank {rank} but {rows} rows")]
    RankCheckFailed { rank: usize, rows: usize },
    #[error("constraint set must be reduced to full rank first")]
    NotFullRank,
    #[error("split policy {policy:?} is not available: {reason}")]
    PolicyInfeasible { policy: SplitPolicy, reason: String },
    #[error("rows of A1 are not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("kriging Gram matrix is singular; redundant constraints remain")]
    SingularGram,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("space-time constraints need n_T >= {min_t} and n_S >= 2, got n_T={n_t}, n_S={n_s}")]
    InvalidDimensions { n_t: usize, n_s: usize, min_t: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintLabel {
    Gc,
    Sc,
    Custom,
}

/// Rows of `A` are linear functionals with implicit zero right-hand side.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    a: SparseMatrix,
    pub label: ConstraintLabel,
    pub full_rank: bool,
    dims: Option<(usize, usize)>,
}

impl ConstraintSet {
    pub fn custom(a: SparseMatrix) -> Self {
        Self {
            a,
            label: ConstraintLabel::Custom,
            full_rank: false,
            dims: None,
        }
    }

    /// Single sum-to-zero constraint on `n` entries.
    pub fn sum_to_zero(n: usize) -> Self {
        let mut t = TripletMatrix::new(1, n);
        (0..n).for_each(|i| t.push(0, i, 1.0));
        Self {
            a: t.to_csc(),
            label: ConstraintLabel::Custom,
            full_rank: true,
            dims: None,
        }
    }

    /// Sum-to-zero plus zero linear trend (1ᵀx = 0, dᵀx = 0 with d = 1..n).
    pub fn sum_and_trend(n: usize) -> Self {
        let mut t = TripletMatrix::new(2, n);
        for i in 0..n {
            t.push(0, i, 1.0);
            t.push(1, i, (i + 1) as f64);
        }
        Self {
            a: t.to_csc(),
            label: ConstraintLabel::Custom,
            full_rank: true,
            dims: None,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.a.ncols()
    }

    /// (n_T, n_S) for the Kronecker-structured sets.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.dims
    }

    /// Numerical rank via pivoted Cholesky of A Aᵀ.
    pub fn rank(&self) -> usize {
        let g = self.a.matmul(&self.a.transpose()).to_dense();
        psd_rank(&g, 1e-10)
    }
}

fn check_dims(n_t: usize, n_s: usize, min_t: usize) -> Result<(), ConstraintError> {
    if n_t < min_t || n_s < 2 {
        return Err(ConstraintError::InvalidDimensions { n_t, n_s, min_t });
    }
    Ok(())
}

/// Rows [I_T ⊗ 1_Sᵀ] (one per time) followed by [1_Tᵀ ⊗ I_S] (one per region).
pub fn build_gc_constraints(n_t: usize, n_s: usize) -> Result<ConstraintSet, ConstraintError> {
    check_dims(n_t, n_s, 2)?;
    let mut t = TripletMatrix::with_capacity(n_t + n_s, n_t * n_s, 2 * n_t * n_s);
    push_gc_rows(&mut t, n_t, n_s);
    Ok(ConstraintSet {
        a: t.to_csc(),
        label: ConstraintLabel::Gc,
        full_rank: false,
        dims: Some((n_t, n_s)),
    })
}

fn push_gc_rows(t: &mut TripletMatrix, n_t: usize, n_s: usize) {
    for ti in 0..n_t {
        for s in 0..n_s {
            t.push(ti, ti * n_s + s, 1.0);
            t.push(n_t + s, ti * n_s + s, 1.0);
        }
    }
}

/// The GC rows followed by [dᵀ ⊗ I_S] with d = (1, ..., n_T).
pub fn build_sc_constraints(n_t: usize, n_s: usize) -> Result<ConstraintSet, ConstraintError> {
    check_dims(n_t, n_s, 3)?;
    let mut t = TripletMatrix::with_capacity(n_t + 2 * n_s, n_t * n_s, 3 * n_t * n_s);
    push_gc_rows(&mut t, n_t, n_s);
    for ti in 0..n_t {
        for s in 0..n_s {
            t.push(n_t + n_s + s, ti * n_s + s, (ti + 1) as f64);
        }
    }
    Ok(ConstraintSet {
        a: t.to_csc(),
        label: ConstraintLabel::Sc,
        full_rank: false,
        dims: Some((n_t, n_s)),
    })
}

/// Removes redundant rows.
///
/// GC and SC drop the last row of the I ⊗ 1ᵀ block; SC additionally drops
/// the last row of the dᵀ ⊗ I block when the system is still rank deficient.
/// Custom sets keep rows greedily in order. The result's rank is verified.
pub fn reduce_to_full_rank(c: &ConstraintSet) -> Result<ConstraintSet, ConstraintError> {
    if c.full_rank {
        return Ok(c.clone());
    }
    let rows = c.n_rows();
    let keep: Vec<usize> = match (c.label, c.dims) {
        (ConstraintLabel::Gc, Some((n_t, _))) => (0..rows).filter(|&r| r != n_t - 1).collect(),
        (ConstraintLabel::Sc, Some((n_t, _))) => {
            let first: Vec<usize> = (0..rows).filter(|&r| r != n_t - 1).collect();
            let trial = c.a.select_rows(&first);
            let g = trial.matmul(&trial.transpose()).to_dense();
            if psd_rank(&g, 1e-10) < first.len() {
                first.into_iter().filter(|&r| r != rows - 1).collect()
            } else {
                first
            }
        }
        _ => greedy_independent_rows(&c.a),
    };
    let a = c.a.select_rows(&keep);
    let reduced = ConstraintSet {
        a,
        label: c.label,
        full_rank: true,
        dims: c.dims,
    };
    let rank = reduced.rank();
    if rank < keep.len() {
        return Err(ConstraintError::RankCheckFailed { rank, rows: keep.len() });
    }
    Ok(reduced)
}

/// Keeps row i when its Schur-complement pivot in A Aᵀ, given the rows kept
/// so far, is not negligible.
fn greedy_independent_rows(a: &SparseMatrix) -> Vec<usize> {
    greedy_independent(&a.matmul(&a.transpose()).to_dense())
}

fn greedy_independent(g: &DMatrix<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    // l[m] is row m of the Cholesky factor of the kept rows' Gram matrix
    let mut l: Vec<Vec<f64>> = Vec::new();
    for i in 0..g.nrows() {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (j, &kj) in kept.iter().enumerate() {
            let v = g[(i, kj)] - dot(&row, &l[j][..j]);
            row.push(v / l[j][j]);
        }
        let pivot = g[(i, i)] - dot(&row, &row);
        if pivot > 1e-9 * g[(i, i)] && g[(i, i)] > 0.0 {
            row.push(pivot.sqrt());
            l.push(row);
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    Auto,
    Spatial,
    Temporal,
}

/// Which block was absorbed into the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedPolicy {
    SpatialFirst,
    TemporalFirst,
}

impl SplitPolicy {
    /// Spatial-first when n_S ≥ n_T (ties go to spatial-first).
    pub fn resolve(self, n_t: usize, n_s: usize) -> ResolvedPolicy {
        match self {
            SplitPolicy::Spatial => ResolvedPolicy::SpatialFirst,
            SplitPolicy::Temporal => ResolvedPolicy::TemporalFirst,
            SplitPolicy::Auto if n_s >= n_t => ResolvedPolicy::SpatialFirst,
            SplitPolicy::Auto => ResolvedPolicy::TemporalFirst,
        }
    }
}

/// A1 (orthonormal, absorbed by Z = I − A1ᵀA1) and A2 (kriged).
#[derive(Debug, Clone)]
pub struct HymikSplit {
    pub a1: SparseMatrix,
    pub a2: SparseMatrix,
    pub z: SparseMatrix,
    pub policy: ResolvedPolicy,
}

impl HymikSplit {
    pub fn k1(&self) -> usize {
        self.a1.nrows()
    }

    pub fn k2(&self) -> usize {
        self.a2.nrows()
    }
}

/// Splits a full-rank GC or SC set.
///
/// Spatial-first absorbs e_Tᵀ ⊗ I_S (and for SC d̂ᵀ ⊗ I_S, with d̂ the
/// centred time index scaled to unit norm); temporal-first absorbs
/// I_T ⊗ e_Sᵀ. A2 is the reduced set orthogonalised against A1 and itself,
/// dropping rows whose residual norm is below 1e-10 of the original.
pub fn split_constraints(
    c: &ConstraintSet,
    n_t: usize,
    n_s: usize,
    policy: SplitPolicy,
) -> Result<HymikSplit, ConstraintError> {
    if !c.full_rank {
        return Err(ConstraintError::NotFullRank);
    }
    let resolved = policy.resolve(n_t, n_s);
    if c.label == ConstraintLabel::Custom || c.dims != Some((n_t, n_s)) {
        return Err(ConstraintError::PolicyInfeasible {
            policy,
            reason: "only GC/SC sets with matching (n_T, n_S) have a known Kronecker split".into(),
        });
    }
    let n = n_t * n_s;
    let a1 = match resolved {
        ResolvedPolicy::SpatialFirst => {
            let k1 = if c.label == ConstraintLabel::Sc { 2 * n_s } else { n_s };
            let mut t = TripletMatrix::with_capacity(k1, n, k1 * n_t);
            let e = 1.0 / (n_t as f64).sqrt();
            for s in 0..n_s {
                for ti in 0..n_t {
                    t.push(s, ti * n_s + s, e);
                }
            }
            if c.label == ConstraintLabel::Sc {
                let d_hat = unit_centred_trend(n_t);
                for s in 0..n_s {
                    for (ti, &d) in d_hat.iter().enumerate() {
                        t.push(n_s + s, ti * n_s + s, d);
                    }
                }
            }
            t.to_csc()
        }
        ResolvedPolicy::TemporalFirst => {
            let mut t = TripletMatrix::with_capacity(n_t, n, n);
            let e = 1.0 / (n_s as f64).sqrt();
            for ti in 0..n_t {
                for s in 0..n_s {
                    t.push(ti, ti * n_s + s, e);
                }
            }
            t.to_csc()
        }
    };
    let a2 = orthogonal_remainder(&a1, c.matrix());
    let z = build_projection(&a1)?;
    Ok(HymikSplit {
        a1,
        a2,
        z,
        policy: resolved,
    })
}

/// (d − d̄)/‖d − d̄‖ for d = 1..n_T: the standardised time index divided by √n_T.
pub fn unit_centred_trend(n_t: usize) -> Vec<f64> {
    let mean = (n_t as f64 + 1.0) / 2.0;
    let centred: Vec<f64> = (1..=n_t).map(|t| t as f64 - mean).collect();
    let norm = dot(&centred, &centred).sqrt();
    centred.into_iter().map(|v| v / norm).collect()
}

/// Rows of `full` with their A1 components removed, then orthonormalised
/// among themselves in row order; rows that vanish (residual below 1e-6 of
/// their original norm) are dropped.
fn orthogonal_remainder(a1: &SparseMatrix, full: &SparseMatrix) -> SparseMatrix {
    let (k, n) = (full.nrows(), full.ncols());
    let mut r = DMatrix::<f64>::zeros(k, n);
    let mut norm0 = vec![0.0; k];
    for (i, j, v) in full.iter() {
        r[(i, j)] += v;
        norm0[i] += v * v;
    }
    for _ in 0..2 {
        let mut c = DMatrix::<f64>::zeros(k, a1.nrows());
        for (q, j, v) in a1.iter() {
            c.column_mut(q).axpy(v, &r.column(j), 1.0);
        }
        for (q, j, v) in a1.iter() {
            r.column_mut(j).axpy(-v, &c.column(q), 1.0);
        }
    }

    // in-order pivoted Cholesky of the Gram matrix picks the rows to keep
    let g = &r * r.transpose();
    let mut kept: Vec<usize> = Vec::new();
    let mut l: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (m, &km) in kept.iter().enumerate() {
            let v = g[(i, km)] - dot(&row, &l[m][..m]);
            row.push(v / l[m][m]);
        }
        let pivot = g[(i, i)] - dot(&row, &row);
        if pivot > 1e-12 * norm0[i] {
            row.push(pivot.sqrt());
            l.push(row);
            kept.push(i);
        }
    }
    let m = kept.len();
    let l = DMatrix::from_fn(m, m, |i, j| if j <= i { l[i][j] } else { 0.0 });
    let rk = r.select_rows(&kept);
    let inv = l.solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive pivots");
    let mut q = inv * rk;
    // second pass restores orthonormality lost to the Gram route
    if let Some(chol) = (&q * q.transpose()).cholesky() {
        let inv2 = chol.l().solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive pivots");
        q = inv2 * q;
    }
    let mut t = TripletMatrix::new(m, n);
    for j in 0..n {
        for i in 0..m {
            let v = q[(i, j)];
            if v.abs() > 1e-15 {
                t.push(i, j, v);
            }
        }
    }
    t.to_csc()
}

/// Z = I − A1ᵀA1 for A1 with orthonormal rows.
pub fn build_projection(a1: &SparseMatrix) -> Result<SparseMatrix, ConstraintError> {
    let a1t = a1.transpose();
    let g = a1.matmul(&a1t);
    let mut deviation: f64 = 0.0;
    for (i, j, v) in g.iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        deviation = deviation.max((v - target).abs());
    }
    for i in 0..g.nrows() {
        if g.position(i, i).is_none() {
            deviation = deviation.max(1.0);
        }
    }
    if deviation > 1e-8 {
        return Err(ConstraintError::NotOrthonormal { deviation });
    }
    let outer = a1t.matmul(a1);
    Ok(SparseMatrix::identity(a1.ncols()).add_scaled(1.0, &outer, -1.0))
}

/// [[κI, −κZ], [−κZ, κZ + Q_ε]] for the pair (x, x*).
pub fn assemble_joint_precision(
    z: &SparseMatrix,
    q_eps: &SparseMatrix,
    kappa: f64,
) -> Result<SparseMatrix, ConstraintError> {
    let n = z.nrows();
    for m in [z.ncols(), q_eps.nrows(), q_eps.ncols()] {
        if m != n {
            return Err(ConstraintError::DimensionMismatch { expected: n, found: m });
        }
    }
    let mut t = TripletMatrix::with_capacity(2 * n, 2 * n, 2 * n + 2 * z.nnz() + q_eps.nnz());
    for i in 0..n {
        t.push(i, i, kappa);
    }
    t.push_block(0, n, z, -kappa);
    t.push_block(n, 0, z, -kappa);
    // κZ + κA₁ᵀA₁ = κI: the A₁ directions of x* never reach x, and giving
    // them precision κ instead of ε keeps the joint matrix well conditioned
    for i in 0..n {
        t.push(n + i, n + i, kappa);
    }
    t.push_block(n, n, q_eps, 1.0);
    Ok(t.to_csc())
}

/// Conditioning by kriging against `A x = 0` for a factored precision
/// Q = Pᵀ L Lᵀ P.
///
/// Holds W = L⁻¹ P Aᵀ and the Cholesky factor of the Gram matrix
/// A Q⁻¹ Aᵀ = WᵀW. Forming W takes one forward solve per constraint; a
/// correction then needs a single back solve.
#[derive(Debug, Clone)]
pub struct Kriging {
    n: usize,
    k: usize,
    /// Column-major n x k, pivot order.
    w: Vec<f64>,
    gram: Option<Cholesky<f64, Dyn>>,
    factor: Option<CholeskyFactor>,
    /// Rows of A actually used, when redundant rows were dropped.
    rows: Option<Vec<usize>>,
}

impl Kriging {
    pub fn new(a: &SparseMatrix, factor: &CholeskyFactor) -> Result<Self, ConstraintError> {
        Self::build(a, factor, false)
    }

    /// Like `new`, but redundant rows of A are skipped (greedily, in row
    /// order, by their pivot in the Gram matrix) instead of failing.
    pub fn new_allowing_redundancy(a: &SparseMatrix, factor: &CholeskyFactor) -> Result<Self, ConstraintError> {
        Self::build(a, factor, true)
    }

    fn build(a: &SparseMatrix, factor: &CholeskyFactor, lenient: bool) -> Result<Self, ConstraintError> {
        let n = factor.dim();
        if a.ncols() != n {
            return Err(ConstraintError::DimensionMismatch {
                expected: n,
                found: a.ncols(),
            });
        }
        let k = a.nrows();
        if k == 0 {
            return Ok(Self {
                n,
                k,
                w: Vec::new(),
                gram: None,
                factor: None,
                rows: None,
            });
        }
        let at = a.transpose();
        let mut w = vec![0.0; n * k];
        for j in 0..k {
            let (rows, vals) = at.col(j);
            for (&i, &x) in rows.iter().zip(vals) {
                w[j * n + i] = x;
            }
        }
        factor.forward_many(&mut w)?;
        let wm = DMatrix::from_column_slice(n, k, &w);
        // blocked product; `tr_mul` goes entry by entry and is far slower here
        let g = wm.transpose() * &wm;
        let g = (&g + g.transpose()) * 0.5;
        if let Some(chol) = checked_cholesky(&g) {
            return Ok(Self {
                n,
                k,
                w,
                gram: Some(chol),
                factor: Some(factor.clone()),
                rows: None,
            });
        }
        if !lenient {
            return Err(ConstraintError::SingularGram);
        }
        let keep = greedy_independent(&g);
        let g_sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| g[(keep[i], keep[j])]);
        let chol = checked_cholesky(&g_sub).ok_or(ConstraintError::SingularGram)?;
        let mut w_sub = Vec::with_capacity(n * keep.len());
        for &j in &keep {
            w_sub.extend_from_slice(&w[j * n..(j + 1) * n]);
        }
        Ok(Self {
            n,
            k: keep.len(),
            w: w_sub,
            gram: Some(chol),
            factor: Some(factor.clone()),
            rows: Some(keep),
        })
    }

    /// Indices of the rows of A in use (`None`: all of them).
    pub fn kept_rows(&self) -> Option<&[usize]> {
        self.rows.as_deref()
    }

    pub fn n_constraints(&self) -> usize {
        self.k
    }

    /// x = x* − Q⁻¹Aᵀ G⁻¹ A x*
    pub fn correct(&self, a: &SparseMatrix, x_star: &[f64]) -> Vec<f64> {
        let mut x = x_star.to_vec();
        let (Some(chol), Some(factor)) = (&self.gram, &self.factor) else {
            return x;
        };
        let ax = a.mul_vec(x_star);
        let r = match &self.rows {
            Some(rows) => nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|&i| ax[i])),
            None => nalgebra::DVector::from_vec(ax),
        };
        let u = chol.solve(&r);
        let mut y = vec![0.0; self.n];
        for (j, &uj) in u.iter().enumerate() {
            if uj != 0.0 {
                let col = &self.w[j * self.n..(j + 1) * self.n];
                y.iter_mut().zip(col).for_each(|(yi, wi)| *yi += uj * wi);
            }
        }
        let shift = factor.backward(&y).expect("dimensions fixed at construction");
        x.iter_mut().zip(&shift).for_each(|(xi, si)| *xi -= si);
        x
    }

    /// log |A Q⁻¹ Aᵀ|
    pub fn log_det_gram(&self) -> f64 {
        self.gram.as_ref().map_or(0.0, |c| {
            2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        })
    }

    /// diag(Q⁻¹Aᵀ G⁻¹ A Q⁻¹): the variance removed by conditioning on A x = 0.
    pub fn variance_reduction(&self) -> Vec<f64> {
        let (Some(chol), Some(factor)) = (&self.gram, &self.factor) else {
            return vec![0.0; self.n];
        };
        // columns of L⁻ᵀ W L_G⁻ᵀ; their squares summed row-wise give the diagonal
        let wt = DMatrix::from_column_slice(self.n, self.k, &self.w).transpose();
        let m = chol.l().solve_lower_triangular(&wt).expect("triangular solve");
        let mut out = vec![0.0; self.n];
        for j in 0..self.k {
            let row: Vec<f64> = m.row(j).iter().copied().collect();
            let col = factor.backward(&row).expect("dimensions fixed at construction");
            out.iter_mut().zip(&col).for_each(|(o, c)| *o += c * c);
        }
        out
    }
}

fn checked_cholesky(g: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let max_diag = g.diagonal().max();
    let chol = g.clone().cholesky()?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    (min_pivot > 1e-13 * max_diag).then_some(chol)
}

/// log |A Aᵀ| (restricted to `rows` when given).
pub fn log_det_gram_rows(a: &SparseMatrix, rows: Option<&[usize]>) -> Result<f64, ConstraintError> {
    let sub;
    let a = match rows {
        Some(r) => {
            sub = a.select_rows(r);
            &sub
        }
        None => a,
    };
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let g = a.matmul(&a.transpose()).to_dense();
    let chol = checked_cholesky(&g).ok_or(ConstraintError::SingularGram)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// One-shot conditioning by kriging of `x_star` onto {A2 x = 0}.
pub fn krige_correct(
    x_star: &[f64],
    a2: &SparseMatrix,
    factor: &CholeskyFactor,
) -> Result<Vec<f64>, ConstraintError> {
    if x_star.len() != factor.dim() {
        return Err(ConstraintError::DimensionMismatch {
            expected: factor.dim(),
            found: x_star.len(),
        });
    }
    Ok(Kriging::new(a2, factor)?.correct(a2, x_star))
}

/// Max |A x|.
pub fn max_violation(a: &SparseMatrix, x: &[f64]) -> f64 {
    a.mul_vec(x).iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Dense row vectors of a constraint matrix (small systems and tests).
pub fn dense_rows(a: &SparseMatrix) -> Vec<Vec<f64>> {
    a.dense_rows()
}

/// Rank of the row space of a stack of dense rows.
pub fn stacked_rank(blocks: &[&SparseMatrix]) -> usize {
    let rows: Vec<Vec<f64>> = blocks.iter().flat_map(|b| b.dense_rows()).collect();
    psd_rank(&gram(&rows), 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::cholesky;

    fn residual_outside(span: &[Vec<f64>], rows: &[Vec<f64>]) -> f64 {
        let (basis, _) = crate::dense::orthonormalize_against(&[], span, 1e-10);
        rows.iter()
            .map(|r| {
                let mut x = r.clone();
                for q in &basis {
                    let c = dot(&x, q);
                    x.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
                }
                dot(&x, &x).sqrt() / dot(r, r).sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gc_and_sc_ranks() {
        let gc = build_gc_constraints(10, 12).unwrap();
        assert_eq!(gc.rank(), 10 + 12 - 1);
        let r = reduce_to_full_rank(&gc).unwrap();
        assert_eq!(r.n_rows(), 21);
        let sc = build_sc_constraints(10, 12).unwrap();
        assert_eq!(sc.rank(), 10 + 2 * 12 - 2);
        let r = reduce_to_full_rank(&sc).unwrap();
        assert_eq!(r.n_rows(), sc.rank());
        assert_eq!(reduce_to_full_rank(&r).unwrap().n_rows(), r.n_rows());
    }

    #[test]
    fn rejects_short_series() {
        assert!(build_sc_constraints(2, 5).is_err());
        assert!(build_gc_constraints(1, 5).is_err());
    }

    #[test]
    fn custom_reduction_keeps_independent_rows() {
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0],
        ));
        let r = reduce_to_full_rank(&ConstraintSet::custom(a)).unwrap();
        assert_eq!(r.n_rows(), 2);
    }

    #[test]
    fn split_spans_full_set() {
        for (label_sc, n_t, n_s, policy, k2) in [
            (false, 6, 9, SplitPolicy::Auto, 5),
            (false, 6, 9, SplitPolicy::Temporal, 8),
            (true, 6, 9, SplitPolicy::Spatial, 4),
            (true, 6, 9, SplitPolicy::Temporal, 16),
        ] {
            let c = if label_sc {
                build_sc_constraints(n_t, n_s).unwrap()
            } else {
                build_gc_constraints(n_t, n_s).unwrap()
            };
            let red = reduce_to_full_rank(&c).unwrap();
            let split = split_constraints(&red, n_t, n_s, policy).unwrap();
            assert_eq!(split.k2(), k2, "{label_sc} {policy:?}");
            assert_eq!(split.k1() + split.k2(), red.n_rows());
            let a1 = split.a1.dense_rows();
            let a2 = split.a2.dense_rows();
            // A2 is orthonormal and orthogonal to A1
            for (i, r) in a2.iter().enumerate() {
                assert!((dot(r, r) - 1.0).abs() < 1e-12);
                for q in a1.iter().chain(&a2[..i]) {
                    assert!(dot(r, q).abs() < 1e-12);
                }
            }
            let both: Vec<Vec<f64>> = a1.iter().chain(&a2).cloned().collect();
            assert!(residual_outside(&both, &c.matrix().dense_rows()) < 1e-10);
            assert!(residual_outside(&c.matrix().dense_rows(), &both) < 1e-10);
        }
    }

    #[test]
    fn split_needs_full_rank_and_known_layout() {
        let c = build_gc_constraints(4, 5).unwrap();
        assert_eq!(split_constraints(&c, 4, 5, SplitPolicy::Auto).unwrap_err(), ConstraintError::NotFullRank);
        let r = reduce_to_full_rank(&c).unwrap();
        assert!(matches!(
            split_constraints(&r, 5, 4, SplitPolicy::Auto),
            Err(ConstraintError::PolicyInfeasible { .. })
        ));
        let custom = ConstraintSet::sum_to_zero(20);
        assert!(matches!(
            split_constraints(&custom, 4, 5, SplitPolicy::Spatial),
            Err(ConstraintError::PolicyInfeasible { .. })
        ));
    }

    #[test]
    fn projection_is_idempotent_and_kills_a1() {
        let r = reduce_to_full_rank(&build_sc_constraints(5, 7).unwrap()).unwrap();
        let s = split_constraints(&r, 5, 7, SplitPolicy::Spatial).unwrap();
        let z = s.z.to_dense();
        assert!((&z * &z - &z).amax() < 1e-12);
        assert!((s.a1.to_dense() * &z).amax() < 1e-12);
        assert_eq!(s.z.nnz(), 7 * 25);
        let bad = SparseMatrix::from_dense(&DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]));
        assert!(matches!(build_projection(&bad), Err(ConstraintError::NotOrthonormal { .. })));
    }

    #[test]
    fn kriging_matches_dense_conditional_mean() {
        let n = 12;
        let mut t = TripletMatrix::new(n, n);
        for i in 0..n {
            t.push(i, i, 3.0 + i as f64 * 0.1);
            if i + 1 < n {
                t.push_sym(i, i + 1, -1.0);
            }
        }
        let q = t.to_csc();
        let a = build_gc_constraints(3, 4).unwrap();
        let a = reduce_to_full_rank(&a).unwrap();
        let f = cholesky(&q).unwrap();
        let x_star: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = krige_correct(&x_star, a.matrix(), &f).unwrap();
        assert!(max_violation(a.matrix(), &x) < 1e-12);

        let qd = q.to_dense();
        let ad = a.matrix().to_dense();
        let s = qd.clone().try_inverse().unwrap();
        let g = &ad * &s * ad.transpose();
        let xs = nalgebra::DVector::from_vec(x_star.clone());
        let w = g.clone().try_inverse().unwrap() * (&ad * &xs);
        let expect = &xs - &s * ad.transpose() * w;
        for i in 0..n {
            assert!((x[i] - expect[i]).abs() < 1e-12);
        }
        let k = Kriging::new(a.matrix(), &f).unwrap();
        assert!((k.log_det_gram() - g.determinant().ln()).abs() < 1e-10);
        let cond = &s - &s * ad.transpose() * g.try_inverse().unwrap() * &ad * &s;
        let red = k.variance_reduction();
        for i in 0..n {
            assert!((s[(i, i)] - red[i] - cond[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn redundant_rows_make_gram_singular() {
        let q = SparseMatrix::identity(12);
        let f = cholesky(&q).unwrap();
        let a = build_gc_constraints(3, 4).unwrap();
        assert_eq!(
            krige_correct(&[0.0; 12], a.matrix(), &f).unwrap_err(),
            ConstraintError::SingularGram
        );
    }

    #[test]
    fn redundant_rows_can_be_skipped() {
        let q = SparseMatrix::identity(12);
        let f = cholesky(&q).unwrap();
        let raw = build_gc_constraints(3, 4).unwrap();
        let red = reduce_to_full_rank(&raw).unwrap();
        let x0: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let k = Kriging::new_allowing_redundancy(raw.matrix(), &f).unwrap();
        assert_eq!(k.n_constraints(), 6);
        let a = k.correct(raw.matrix(), &x0);
        let b = krige_correct(&x0, red.matrix(), &f).unwrap();
        for i in 0..12 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_precision_blocks() {
        let z = SparseMatrix::identity(3).add_scaled(1.0, &SparseMatrix::from_dense(&DMatrix::from_element(3, 3, 1.0 / 3.0)), -1.0);
        let q = SparseMatrix::identity(3).scale(2.0);
        let j = assemble_joint_precision(&z, &q, 10.0).unwrap();
        assert_eq!(j.nrows(), 6);
        assert!((j.get(0, 0) - 10.0).abs() < 1e-15);
        assert!((j.get(3, 3) - 12.0).abs() < 1e-12);
        assert!(j.get(3, 4).abs() < 1e-15);
        assert!((j.get(0, 4) + 10.0 * (-1.0 / 3.0)).abs() < 1e-12);
        assert!(assemble_joint_precision(&z, &SparseMatrix::identity(4), 1.0).is_err());
    }
}
