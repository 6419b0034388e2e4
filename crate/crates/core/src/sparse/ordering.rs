use std::collections::BTreeSet;

use super::SparseMatrix;

/// Fill-reducing ordering by minimum degree on the explicit elimination graph.
///
/// Nodes whose initial degree exceeds `max(16, 10·√n)` (intercepts, temporal
/// effects coupled to every region, ...) are removed up front and ordered
/// last, as in AMD. Ties are broken by node index, so the ordering is a pure
/// function of the sparsity pattern.
///
/// Returns `perm` with `perm[k]` = original index of the k-th pivot.
pub fn minimum_degree(q: &SparseMatrix) -> Vec<usize> {
    let n = q.nrows();
    assert_eq!(n, q.ncols(), "ordering needs a square pattern");
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in q.iter() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    let dense_cut = 16usize.max((10.0 * (n as f64).sqrt()) as usize);
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > dense_cut).collect();
    if dense.iter().any(|&d| d) {
        for a in adj.iter_mut() {
            a.retain(|&u| !dense[u]);
        }
    }

    let mut queue: BTreeSet<(usize, usize)> = (0..n)
        .filter(|&v| !dense[v])
        .map(|v| (adj[v].len(), v))
        .collect();
    let mut perm = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some((_, v)) = queue.pop_first() {
        perm.push(v);
        let clique = std::mem::take(&mut adj[v]);
        for &u in &clique {
            let old_deg = adj[u].len();
            merged.clear();
            merge_excluding(&adj[u], &clique, v, u, &mut merged);
            std::mem::swap(&mut adj[u], &mut merged);
            queue.remove(&(old_deg, u));
            queue.insert((adj[u].len(), u));
        }
    }
    perm.extend((0..n).filter(|&v| dense[v]));
    perm
}

/// Sorted union of `a` and `b` without `skip_a` and `skip_b`.
fn merge_excluding(a: &[usize], b: &[usize], skip_a: usize, skip_b: usize, out: &mut Vec<usize>) {
    let (mut i, mut j) = (0, 0);
    loop {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(&x), Some(&y)) if x > y => {
                j += 1;
                y
            }
            (Some(&x), Some(_)) => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => break,
        };
        if next != skip_a && next != skip_b {
            out.push(next);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletMatrix;

    fn arrow(n: usize) -> SparseMatrix {
        // node 0 coupled to everyone: eliminating it first fills the matrix
        let mut t = TripletMatrix::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0);
            if i > 0 {
                t.push_sym(0, i, 1.0);
            }
        }
        t.to_csc()
    }

    #[test]
    fn hub_node_goes_last() {
        let perm = minimum_degree(&arrow(8));
        // once one leaf remains the hub ties with it; either order is fill-free
        assert!(perm[..6].iter().all(|&v| v != 0));
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        let m = arrow(50);
        assert_eq!(minimum_degree(&m), minimum_degree(&m));
    }

    #[test]
    fn merge_skips() {
        let mut out = Vec::new();
        merge_excluding(&[1, 3, 5], &[2, 3, 4], 5, 2, &mut out);
        assert_eq!(out, vec![1, 3, 4]);
    }
}
