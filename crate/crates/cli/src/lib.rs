//! Experiment driver for type IV space-time models: data ingestion, fits
//! with either constraint mechanism, reports and benchmarks.

pub mod io;
pub mod report;
pub mod run;

pub use io::{load_counts, load_graph, CountData, DataError, Truth};
pub use report::{BenchmarkResult, Report, Status};
pub use run::{run_benchmark, run_experiment, run_simulation, RunConfig, RunError, SimulateArgs};
