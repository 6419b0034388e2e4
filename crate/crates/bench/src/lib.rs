//! Shared fixtures for the criterion benches.

use hymik_core::likelihood::ObservationSet;
use hymik_core::model::{build_latent_model, InteractionConstraints, LatentModel, Method, ModelSpec};
use hymik_core::simulate::{simulate_dataset, SimulationConfig};
use hymik_core::sparse::{SparseMatrix, TripletMatrix};
use hymik_core::structures::Graph;

/// Simulated SC data on an `rows x cols` triangulated lattice.
pub fn lattice_problem(rows: usize, cols: usize, n_t: usize, method: Method) -> (LatentModel, ObservationSet) {
    let graph = Graph::triangulated_lattice(rows, cols, 7);
    let cfg = SimulationConfig {
        n_replicates: 5,
        ..SimulationConfig::new(graph.clone(), n_t, 3)
    };
    let data = simulate_dataset(&cfg).expect("simulation");
    let mut spec = ModelSpec::new(n_t, InteractionConstraints::Sc, method, data.obs.family);
    spec.scale = true;
    (build_latent_model(&graph, spec).expect("model"), data.obs)
}

/// `k` dense pseudo-random rows over `n` columns.
pub fn dense_constraints(k: usize, n: usize) -> SparseMatrix {
    let mut t = TripletMatrix::new(k, n);
    let mut state = 0x2545_f491_4f6c_dd1du64;
    for i in 0..k {
        for j in 0..n {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            t.push(i, j, (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
    }
    t.to_csc()
}
