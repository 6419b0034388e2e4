//! Regenerates the bundled files under `data/`.
//!
//!     cargo run --release -p hymik --example make_data -- data

use std::path::PathBuf;

use hymik_core::simulate::{simulate_dataset, SimulationConfig};
use hymik_core::structures::Graph;

fn counties() -> Graph {
    let edges = [
        (0, 1),
        (0, 2),
        (1, 2),
        (1, 3),
        (2, 3),
        (2, 4),
        (3, 4),
        (3, 5),
        (4, 6),
        (5, 6),
        (5, 7),
        (6, 8),
        (7, 8),
        (7, 9),
        (8, 10),
        (9, 10),
    ];
    Graph::from_edges(11, &edges).expect("valid county graph")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;

    std::fs::write(dir.join("lattice544.graph"), Graph::triangulated_lattice(32, 17, 7).to_text())?;

    let graph = counties();
    std::fs::write(dir.join("counties11.graph"), graph.to_text())?;

    // daily counts around e^1.2 per county, written as running totals the way
    // surveillance dashboards publish them
    let cfg = SimulationConfig {
        intercept: 1.2,
        n_replicates: 1,
        ..SimulationConfig::new(graph, 500, 2020)
    };
    let sim = simulate_dataset(&cfg)?;
    let mut w = csv::Writer::from_path(dir.join("covid_sample.csv"))?;
    w.write_record(["time", "region", "count", "exposure"])?;
    let mut totals = vec![0.0; sim.n_s];
    for t in 0..sim.n_t {
        for (s, total) in totals.iter_mut().enumerate() {
            *total += sim.obs.cell_sum(t * sim.n_s + s);
            w.write_record([(t + 1).to_string(), s.to_string(), format!("{total}"), "1".into()])?;
        }
    }
    w.flush()?;
    Ok(())
}
