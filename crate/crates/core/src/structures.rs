//! Neighbourhood graphs and the structure matrices of the intrinsic GMRF
//! priors: random walks in time, ICAR in space and their Kronecker product.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::constraints::ConstraintSet;
use crate::dense::symmetric_eigenvalues;
use crate::sparse::{cholesky, SparseError, SparseMatrix, TripletMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("node {from} lists {to} as a neighbour but not vice versa")]
    AsymmetricAdjacency { from: usize, to: usize },
    #[error("node {0} lists itself as a neighbour")]
    SelfLoop(usize),
    #[error("neighbour index {index} out of range for {n} nodes")]
    OutOfRange { index: usize, n: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("random walk of order {order} needs more than {order} nodes, got {n}")]
    TooShort { n: usize, order: usize },
    #[error("graph has {components} connected components; ICAR needs exactly one")]
    Disconnected { components: usize },
    #[error("structure matrix is already scaled")]
    AlreadyScaled,
    #[error("constraints do not cover the null space of the structure matrix")]
    UnderConstrained,
    #[error("random walk order must be 1 or 2, got {0}")]
    UnsupportedOrder(usize),
    #[error("constraint matrix has {found} columns, structure has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Undirected neighbourhood graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Validates symmetry, self-loops and index range; sorts and dedups lists.
    pub fn new(mut adjacency: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let n = adjacency.len();
        for (s, nb) in adjacency.iter_mut().enumerate() {
            nb.sort_unstable();
            nb.dedup();
            if let Some(&bad) = nb.iter().find(|&&t| t >= n) {
                return Err(GraphError::OutOfRange { index: bad, n });
            }
            if nb.binary_search(&s).is_ok() {
                return Err(GraphError::SelfLoop(s));
            }
        }
        for (s, nb) in adjacency.iter().enumerate() {
            for &t in nb {
                if adjacency[t].binary_search(&s).is_err() {
                    return Err(GraphError::AsymmetricAdjacency { from: s, to: t });
                }
            }
        }
        Ok(Self { adjacency })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::OutOfRange { index: a.max(b), n });
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        Self::new(adj)
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges).expect("path graph is valid")
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((n - 1, 0));
        }
        Self::from_edges(n, &edges).expect("cycle graph is valid")
    }

    /// Rook-adjacency lattice, row-major node numbering.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    edges.push((v, v + 1));
                }
                if r + 1 < rows {
                    edges.push((v, v + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges).expect("grid graph is valid")
    }

    /// Planar triangulation of a lattice: rook edges plus one diagonal per
    /// cell, the diagonal's direction drawn from a seeded ChaCha20 stream.
    /// Interior nodes have degree 6, close to real district maps.
    pub fn triangulated_lattice(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    edges.push((v, v + 1));
                }
                if r + 1 < rows {
                    edges.push((v, v + cols));
                }
                if r + 1 < rows && c + 1 < cols {
                    if rng.random_bool(0.5) {
                        edges.push((v, v + cols + 1));
                    } else {
                        edges.push((v + 1, v + cols));
                    }
                }
            }
        }
        Self::from_edges(rows * cols, &edges).expect("lattice graph is valid")
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.adjacency[s]
    }

    pub fn degree(&self, s: usize) -> usize {
        self.adjacency[s].len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn component_count(&self) -> usize {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in &self.adjacency[v] {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
        }
        count
    }

    /// Parses the text graph format: node count on the first line, then one
    /// line per node `id degree nb_1 ... nb_degree`.
    ///
    /// Ids are 0-based; files whose ids run exactly 1..=n (the INLA
    /// convention) are shifted down automatically.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (first_line, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            message: "empty graph file".into(),
        })?;
        let n: usize = header.parse().map_err(|_| GraphError::Parse {
            line: first_line,
            message: format!("expected node count, found {header:?}"),
        })?;
        let mut rows: Vec<(usize, usize, Vec<usize>)> = Vec::with_capacity(n);
        for (line, text) in lines {
            let nums: Vec<usize> = text
                .split_whitespace()
                .map(|tok| {
                    tok.parse().map_err(|_| GraphError::Parse {
                        line,
                        message: format!("not a non-negative integer: {tok:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if nums.len() < 2 || nums.len() != nums[1] + 2 {
                return Err(GraphError::Parse {
                    line,
                    message: "expected `id degree` followed by `degree` neighbour ids".into(),
                });
            }
            rows.push((line, nums[0], nums[2..].to_vec()));
        }
        if rows.len() != n {
            return Err(GraphError::Parse {
                line: first_line,
                message: format!("header announces {n} nodes, file lists {}", rows.len()),
            });
        }
        let one_based = {
            let mut ids: Vec<usize> = rows.iter().map(|r| r.1).collect();
            ids.sort_unstable();
            n > 0 && ids.iter().copied().eq(1..=n)
        };
        let shift = usize::from(one_based);
        let mut adj = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        for (line, id, nbs) in rows {
            let id = id - shift;
            if id >= n || seen[id] {
                return Err(GraphError::Parse {
                    line,
                    message: format!("node id {} out of range or repeated", id + shift),
                });
            }
            seen[id] = true;
            adj[id] = nbs
                .iter()
                .map(|&t| {
                    t.checked_sub(shift).filter(|&t| t < n).ok_or(GraphError::Parse {
                        line,
                        message: format!("neighbour id {t} out of range"),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        Self::new(adj)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n_nodes());
        for (s, nb) in self.adjacency.iter().enumerate() {
            let _ = write!(out, "{s} {}", nb.len());
            for t in nb {
                let _ = write!(out, " {t}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StructureKind {
    Rw1,
    Rw2,
    Icar,
    Interaction,
}

/// A PSD structure matrix R (prior precision τ·R) with its rank deficiency.
#[derive(Debug, Clone)]
pub struct StructureMatrix {
    pub matrix: SparseMatrix,
    pub rank_deficiency: usize,
    pub kind: StructureKind,
    pub scaled: bool,
    /// Multiplier applied by scaling (1 when unscaled).
    pub scale_factor: f64,
}

impl StructureMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.rank_deficiency
    }

    /// Eigenvalues (ascending) from a dense decomposition.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.matrix.to_dense())
    }

    /// The `rank()` largest eigenvalues, i.e. those of R on its range.
    pub fn nonzero_eigenvalues(&self) -> Vec<f64> {
        let ev = self.eigenvalues();
        ev[self.rank_deficiency..].to_vec()
    }
}

/// R = DᵀD for the `order`-th difference matrix D on `n` time points.
pub fn build_rw_structure(n: usize, order: usize) -> Result<StructureMatrix, StructureError> {
    let kind = match order {
        1 => StructureKind::Rw1,
        2 => StructureKind::Rw2,
        o => return Err(StructureError::UnsupportedOrder(o)),
    };
    if n <= order {
        return Err(StructureError::TooShort { n, order });
    }
    let stencil: &[f64] = if order == 1 { &[-1.0, 1.0] } else { &[1.0, -2.0, 1.0] };
    let mut t = TripletMatrix::new(n, n);
    for start in 0..n - order {
        for (a, &da) in stencil.iter().enumerate() {
            for (b, &db) in stencil.iter().enumerate() {
                t.push(start + a, start + b, da * db);
            }
        }
    }
    Ok(StructureMatrix {
        matrix: t.to_csc(),
        rank_deficiency: order,
        kind,
        scaled: false,
        scale_factor: 1.0,
    })
}

/// ICAR structure: degree on the diagonal, −1 between neighbours.
pub fn build_icar_structure(g: &Graph) -> Result<StructureMatrix, StructureError> {
    let components = g.component_count();
    if components != 1 {
        return Err(StructureError::Disconnected { components });
    }
    let n = g.n_nodes();
    let mut t = TripletMatrix::with_capacity(n, n, n + 2 * g.n_edges());
    for s in 0..n {
        t.push(s, s, g.degree(s) as f64);
        for &u in g.neighbors(s) {
            t.push(s, u, -1.0);
        }
    }
    Ok(StructureMatrix {
        matrix: t.to_csc(),
        rank_deficiency: 1,
        kind: StructureKind::Icar,
        scaled: false,
        scale_factor: 1.0,
    })
}

/// R_δ = R_α ⊗ R_γ in time-major layout: δ index = t·n_S + s.
pub fn build_interaction_structure(r_alpha: &StructureMatrix, r_gamma: &StructureMatrix) -> StructureMatrix {
    let (n_t, n_s) = (r_alpha.dim(), r_gamma.dim());
    let (k_a, k_g) = (r_alpha.rank_deficiency, r_gamma.rank_deficiency);
    StructureMatrix {
        matrix: r_alpha.matrix.kron(&r_gamma.matrix),
        rank_deficiency: k_a * n_s + k_g * n_t - k_a * k_g,
        kind: StructureKind::Interaction,
        scaled: r_alpha.scaled && r_gamma.scaled,
        scale_factor: r_alpha.scale_factor * r_gamma.scale_factor,
    }
}

/// Above this size constrained variances come from sparse solves instead of
/// a dense inverse.
const DENSE_SCALING_LIMIT: usize = 1200;

/// Divides R by exp(mean log (1/Σ_ii)) so the constrained marginal
/// variances have geometric mean one.
pub fn scale_structure(r: &StructureMatrix, constraints: &ConstraintSet) -> Result<StructureMatrix, StructureError> {
    if r.scaled {
        return Err(StructureError::AlreadyScaled);
    }
    let variances = constrained_variances(&r.matrix, constraints.matrix())?;
    let mean_log = variances.iter().map(|v| v.ln()).sum::<f64>() / variances.len() as f64;
    let factor = mean_log.exp();
    Ok(StructureMatrix {
        matrix: r.matrix.scale(factor),
        rank_deficiency: r.rank_deficiency,
        kind: r.kind,
        scaled: true,
        scale_factor: factor,
    })
}

/// Diagonal of the covariance of N(0, R⁻) restricted to {x : A x = 0}.
pub fn constrained_variances(r: &SparseMatrix, a: &SparseMatrix) -> Result<Vec<f64>, StructureError> {
    let n = r.nrows();
    if a.ncols() != n {
        return Err(StructureError::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    if n <= DENSE_SCALING_LIMIT {
        dense_constrained_variances(r, a)
    } else {
        sparse_constrained_variances(r, a)
    }
}

/// With M = R + AᵀA (PD exactly when the constraints cover null(R)),
/// Σ = M⁻¹ − M⁻¹Aᵀ(AM⁻¹Aᵀ)⁻¹AM⁻¹.
fn dense_constrained_variances(r: &SparseMatrix, a: &SparseMatrix) -> Result<Vec<f64>, StructureError> {
    let ad = a.to_dense();
    let m = r.to_dense() + ad.transpose() * &ad;
    let max_diag = m.diagonal().max();
    let chol = m.clone().cholesky().ok_or(StructureError::UnderConstrained)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v * v));
    if min_pivot <= 1e-12 * max_diag {
        return Err(StructureError::UnderConstrained);
    }
    let m_inv = chol.inverse();
    let w = &m_inv * ad.transpose();
    let g = &ad * &w;
    let g_chol = g.cholesky().ok_or(StructureError::UnderConstrained)?;
    let z = g_chol.l().solve_lower_triangular(&w.transpose()).expect("triangular solve");
    Ok((0..r.nrows())
        .map(|i| m_inv[(i, i)] - z.column(i).norm_squared())
        .collect())
}

/// ε-regularised factor plus a kriging correction of its inverse diagonal.
fn sparse_constrained_variances(r: &SparseMatrix, a: &SparseMatrix) -> Result<Vec<f64>, StructureError> {
    let n = r.nrows();
    let diag = r.diagonal();
    let geo = (diag.iter().map(|d| d.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n as f64).exp();
    let eps = 1e-7 * geo;
    let f = cholesky(&r.add_diagonal(eps))?;
    let k = a.nrows();
    let mut w = vec![0.0; n * k];
    let at = a.transpose();
    for j in 0..k {
        let (rows, vals) = at.col(j);
        for (&i, &v) in rows.iter().zip(vals) {
            w[j * n + i] = v;
        }
    }
    f.solve_many(&mut w)?;
    let mut g = DMatrix::zeros(k, k);
    for j in 0..k {
        let aw = a.mul_vec(&w[j * n..(j + 1) * n]);
        for i in 0..k {
            g[(i, j)] = aw[i];
        }
    }
    let g = (&g + g.transpose()) * 0.5;
    let g_chol = g.cholesky().ok_or(StructureError::UnderConstrained)?;
    let wt = DMatrix::from_column_slice(n, k, &w).transpose();
    let z = g_chol.l().solve_lower_triangular(&wt).expect("triangular solve");
    let inv_diag = f.inverse_diagonal();
    let out: Vec<f64> = (0..n).map(|i| inv_diag[i] - z.column(i).norm_squared()).collect();
    // an uncovered null direction leaves variance of order 1/ε behind
    if out.iter().any(|&v| !(v > 0.0) || v * eps > 1e-3) {
        return Err(StructureError::UnderConstrained);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rw1_three() {
        let r = build_rw_structure(3, 1).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(r.matrix.to_dense(), expect);
        assert_eq!(r.rank_deficiency, 1);
    }

    #[test]
    fn rw2_four() {
        let r = build_rw_structure(4, 2).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, -2.0, 1.0, 0.0, -2.0, 5.0, -4.0, 1.0, 1.0, -4.0, 5.0, -2.0, 0.0, 1.0, -2.0, 1.0],
        );
        assert_eq!(r.matrix.to_dense(), expect);
        assert_eq!(r.rank_deficiency, 2);
    }

    #[test]
    fn rw_too_short() {
        assert_eq!(
            build_rw_structure(2, 2).unwrap_err(),
            StructureError::TooShort { n: 2, order: 2 }
        );
        assert_eq!(build_rw_structure(5, 3).unwrap_err(), StructureError::UnsupportedOrder(3));
    }

    #[test]
    fn icar_path_and_cycle() {
        let r = build_icar_structure(&Graph::path(3)).unwrap();
        assert_eq!(r.matrix.to_dense(), build_rw_structure(3, 1).unwrap().matrix.to_dense());
        let c = build_icar_structure(&Graph::cycle(4)).unwrap();
        assert_eq!(c.matrix.diagonal(), vec![2.0; 4]);
        assert!(c.matrix.mul_vec(&[1.0; 4]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn icar_disconnected() {
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(
            build_icar_structure(&g).unwrap_err(),
            StructureError::Disconnected { components: 2 }
        );
    }

    #[test]
    fn interaction_rank_deficiency() {
        let ra = build_rw_structure(3, 1).unwrap();
        let rg = build_icar_structure(&Graph::path(4)).unwrap();
        let rd = build_interaction_structure(&ra, &rg);
        assert_eq!(rd.dim(), 12);
        assert_eq!(rd.rank_deficiency, 6);
    }

    #[test]
    fn graph_validation() {
        assert_eq!(
            Graph::new(vec![vec![1], vec![]]).unwrap_err(),
            GraphError::AsymmetricAdjacency { from: 0, to: 1 }
        );
        assert_eq!(Graph::new(vec![vec![0]]).unwrap_err(), GraphError::SelfLoop(0));
    }

    #[test]
    fn graph_text_round_trip() {
        let g = Graph::triangulated_lattice(4, 5, 3);
        assert_eq!(Graph::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn one_based_files_are_shifted() {
        let g = Graph::parse("3\n1 1 2\n2 2 1 3\n3 1 2\n").unwrap();
        assert_eq!(g, Graph::path(3));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Graph::parse("3\n0 1 1\n1 2 0 x\n2 1 1\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 3, .. }));
        let err = Graph::parse("3\n0 1 1\n1 2 0 2\n2 0\n").unwrap_err();
        assert_eq!(err, GraphError::AsymmetricAdjacency { from: 1, to: 2 });
    }
}
