//! Fitting, comparison and benchmark drivers behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use hymik_core::constraints::{ResolvedPolicy, SplitPolicy};
use hymik_core::inference::{fit, Fit, InferenceError, IntStrategy, LatentSummary, PhaseTimes, Settings};
use hymik_core::likelihood::Family;
use hymik_core::model::{build_latent_model, Hyperparameters, InteractionConstraints, LatentModel, Method, ModelError, ModelSpec};
use hymik_core::simulate::{simulate_dataset, SimulationConfig, SimulationError};
use thiserror::Error;

use crate::io::{load_counts, load_graph, truth_path, write_counts, CountData, DataError, LoadedGraph, Truth};
use crate::report::{
    to_json, write_report, BenchmarkResult, Comparison, MethodResult, MethodTiming, PairedMeans, Report, SplitInfo,
    Status,
};

/// Largest |a·m| / ‖a‖ accepted at the reported means.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn kind(&self) -> String {
        match self {
            RunError::Data(e) => e.kind().to_string(),
            RunError::Model(e) => match e {
                ModelError::Unsupported(_) => "Unsupported".into(),
                ModelError::DimensionMismatch(_) => "DimensionMismatch".into(),
                ModelError::Structure(_) => "Structure".into(),
                ModelError::Constraint(_) => "Constraint".into(),
            },
            RunError::Inference(e) => match e {
                InferenceError::NotConverged { .. } => "NotConverged".into(),
                InferenceError::FactorizationFailed(_) => "FactorizationFailed".into(),
                InferenceError::OptimizerStalled { .. } => "OptimizerStalled".into(),
                InferenceError::NonFinite => "NonFinite".into(),
                _ => "Inference".into(),
            },
            RunError::Simulation(_) => "Simulation".into(),
            RunError::Config(_) => "Config".into(),
            RunError::Write { .. } => "Io".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Poisson,
    Negbinom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConstraintArg {
    Gc,
    Sc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Kriging,
    Hymik,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Auto,
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Ccd,
    Grid,
}

fn arg_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

/// Everything a fit needs; validated by the argument parser before any compute.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Counts table: time,region,count,exposure[,replicate]
    #[arg(long)]
    pub data: PathBuf,
    /// Adjacency file: node count, then `id degree neighbours...` lines
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_enum, default_value = "poisson")]
    pub family: FamilyArg,
    #[arg(long, value_enum, default_value = "sc")]
    pub constraints: ConstraintArg,
    #[arg(long, value_enum, default_value = "hymik")]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub split: SplitArg,
    /// Random-walk order of the temporal main effect
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub order: u8,
    /// Scale structure matrices to unit geometric-mean marginal variance
    #[arg(long)]
    pub scale: bool,
    /// Counts are cumulative; difference them (negative increments become 0)
    #[arg(long)]
    pub cumulative: bool,
    /// Fit with both methods and report paired interaction means
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (overrides HYMIK_THREADS)
    #[arg(long, env = "HYMIK_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "ccd")]
    pub strategy: StrategyArg,
    /// Include wall-clock timings (makes reports run-dependent)
    #[arg(long)]
    pub timings: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.display().to_string());
        m.insert("graph".into(), self.graph.display().to_string());
        m.insert("family".into(), arg_name(self.family));
        m.insert("constraints".into(), arg_name(self.constraints));
        m.insert("method".into(), arg_name(self.method));
        m.insert("split".into(), arg_name(self.split));
        m.insert("order".into(), self.order.to_string());
        m.insert("scale".into(), self.scale.to_string());
        m.insert("cumulative".into(), self.cumulative.to_string());
        m.insert("compare".into(), self.compare.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "threads".into(),
            self.threads.map_or_else(|| "default".to_string(), |t| t.to_string()),
        );
        m.insert("strategy".into(), arg_name(self.strategy));
        m.insert("timings".into(), self.timings.to_string());
        m.insert("out".into(), self.out.display().to_string());
        m
    }

    fn family(&self) -> Family {
        match self.family {
            FamilyArg::Poisson => Family::Poisson,
            FamilyArg::Negbinom => Family::NegBinom,
        }
    }

    fn method(&self) -> Method {
        match self.method {
            MethodArg::Kriging => Method::Kriging,
            MethodArg::Hymik => Method::Hymik,
        }
    }

    fn settings(&self) -> Settings {
        Settings {
            strategy: match self.strategy {
                StrategyArg::Ccd => IntStrategy::Ccd,
                StrategyArg::Grid => IntStrategy::Grid,
            },
            ..Settings::default()
        }
    }

    fn spec(&self, n_t: usize, method: Method) -> ModelSpec {
        let mut spec = ModelSpec::new(
            n_t,
            match self.constraints {
                ConstraintArg::Gc => InteractionConstraints::Gc,
                ConstraintArg::Sc => InteractionConstraints::Sc,
            },
            method,
            self.family(),
        );
        spec.temporal_order = self.order as usize;
        spec.scale = self.scale;
        spec.split = match self.split {
            SplitArg::Auto => SplitPolicy::Auto,
            SplitArg::Spatial => SplitPolicy::Spatial,
            SplitArg::Temporal => SplitPolicy::Temporal,
        };
        spec
    }
}

/// Graph, data and both candidate models, loaded once.
pub struct Inputs {
    pub graph: LoadedGraph,
    pub data: CountData,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, RunError> {
    let graph = load_graph(&cfg.graph)?;
    let data = load_counts(&cfg.data, graph.graph.n_nodes(), cfg.family(), cfg.cumulative)?;
    Ok(Inputs { graph, data })
}

pub fn build_model(cfg: &RunConfig, inputs: &Inputs, method: Method) -> Result<LatentModel, RunError> {
    Ok(build_latent_model(&inputs.graph.graph, cfg.spec(inputs.data.n_t, method))?)
}

fn method_name(m: Method) -> String {
    match m {
        Method::Kriging => "kriging".into(),
        Method::Hymik => "hymik".into(),
    }
}

/// One fit, timed from model construction to the finished summary.
pub fn fit_method(cfg: &RunConfig, inputs: &Inputs, method: Method) -> Result<(MethodResult, PhaseTimes), RunError> {
    let start = Instant::now();
    let model = build_model(cfg, inputs, method)?;
    let init = Hyperparameters::new(1.0, 1.0, 1.0);
    let f: Fit = fit(&model, &inputs.data.obs, cfg.settings(), &init)?;
    let mut times = f.times;
    times.total = start.elapsed().as_secs_f64();
    let mut warnings = f.warnings.clone();
    if inputs.graph.components > 1 {
        warnings.push(format!("graph has {} connected components", inputs.graph.components));
    }
    let result = MethodResult {
        method: method_name(method),
        split: model.split.as_ref().map(|s| SplitInfo {
            policy: match s.policy {
                ResolvedPolicy::SpatialFirst => "spatial_first".into(),
                ResolvedPolicy::TemporalFirst => "temporal_first".into(),
            },
            k1: s.k1(),
            k2: s.k2(),
        }),
        hyper: f.hyper.clone(),
        fixed: f.fixed.clone(),
        latent: LatentSummary {
            means: f.means.clone(),
            sds: f.sds.clone(),
        },
        avg_marginal_loglik: f.avg_marginal_loglik.is_finite().then_some(f.avg_marginal_loglik),
        marginal_loglik_corrected: f.corrected,
        converged: f.converged,
        max_constraint_violation: f.max_constraint_violation,
        grid_points: f.grid.points.len(),
        timings: cfg.timings.then_some(times),
        warnings,
    };
    Ok((result, times))
}

fn status_of(results: &[&MethodResult]) -> Status {
    if results.iter().any(|r| !r.converged) {
        Status::NotConverged
    } else if results.iter().any(|r| !(r.max_constraint_violation <= CONSTRAINT_TOLERANCE)) {
        Status::ConstraintViolation
    } else {
        Status::Ok
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// δ is the last block of the reported latent vector.
fn delta_block(inputs: &Inputs, r: &MethodResult) -> Vec<f64> {
    let n = inputs.data.n_t * inputs.data.n_s;
    let m = &r.latent.means;
    m[m.len() - n..].to_vec()
}

fn scatter_path(out: &Path) -> PathBuf {
    out.with_extension("scatter.csv")
}

fn write_scatter(path: &Path, n_s: usize, pairs: &PairedMeans) -> Result<(), RunError> {
    let mut text = String::from("time,region,kriging,hymik\n");
    for (i, (k, h)) in pairs.kriging.iter().zip(&pairs.hymik).enumerate() {
        text.push_str(&format!("{},{},{k:.16e},{h:.16e}\n", i / n_s + 1, i % n_s));
    }
    std::fs::write(path, text).map_err(|source| RunError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn compare(cfg: &RunConfig, inputs: &Inputs, k: MethodResult, h: MethodResult, factor: f64) -> Result<Comparison, RunError> {
    let pairs = PairedMeans {
        kriging: delta_block(inputs, &k),
        hymik: delta_block(inputs, &h),
    };
    let max_diff = pairs
        .kriging
        .iter()
        .zip(&pairs.hymik)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scatter = scatter_path(&cfg.out);
    write_scatter(&scatter, inputs.data.n_s, &pairs)?;
    Ok(Comparison {
        delta_correlation: pearson(&pairs.kriging, &pairs.hymik),
        delta_max_abs_difference: max_diff,
        computational_factor: cfg.timings.then_some(factor),
        scatter_csv: Some(scatter.display().to_string()),
        paired_delta_means: pairs,
        kriging: k,
        hymik: h,
    })
}

/// Fits as configured and assembles the report (not yet written).
pub fn run_experiment(cfg: &RunConfig) -> Result<Report, RunError> {
    let inputs = load_inputs(cfg)?;
    let primary = cfg.method();
    if !cfg.compare {
        let (r, _) = fit_method(cfg, &inputs, primary)?;
        let status = status_of(&[&r]);
        return Ok(Report::from_result(cfg.echo(), &r, status));
    }
    let (k, tk) = fit_method(cfg, &inputs, Method::Kriging)?;
    let (h, th) = fit_method(cfg, &inputs, Method::Hymik)?;
    let status = status_of(&[&k, &h]);
    let main = if primary == Method::Kriging { &k } else { &h };
    let mut report = Report::from_result(cfg.echo(), main, status);
    report.comparison = Some(compare(cfg, &inputs, k, h, tk.total / th.total)?);
    Ok(report)
}

fn median(v: &[f64]) -> (f64, usize) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let m = idx[idx.len() / 2];
    (v[m], m)
}

/// Warm-up runs, then `runs` timed fits per method; comparison from the last.
pub fn run_benchmark(cfg: &RunConfig, warmup: usize, runs: usize) -> Result<Report, RunError> {
    if runs == 0 {
        return Err(RunError::Config("at least one timed run is needed".into()));
    }
    let inputs = load_inputs(cfg)?;
    let mut timings = Vec::new();
    let mut last = Vec::new();
    for method in [Method::Kriging, Method::Hymik] {
        for _ in 0..warmup {
            fit_method(cfg, &inputs, method)?;
        }
        let mut phases = Vec::new();
        let mut result = None;
        for _ in 0..runs {
            let (r, t) = fit_method(cfg, &inputs, method)?;
            phases.push(t);
            result = Some(r);
        }
        let totals: Vec<f64> = phases.iter().map(|p| p.total).collect();
        let (total, at) = median(&totals);
        timings.push(MethodTiming {
            method: method_name(method),
            total,
            phases: phases[at],
            runs: totals,
        });
        last.push(result.expect("runs > 0"));
    }
    let hymik_t = timings.pop().expect("two methods");
    let kriging_t = timings.pop().expect("two methods");
    let factor = kriging_t.total / hymik_t.total;
    let h = last.pop().expect("two methods");
    let k = last.pop().expect("two methods");
    let status = status_of(&[&k, &h]);
    let main = if cfg.method() == Method::Kriging { &k } else { &h };
    let mut report = Report::from_result(cfg.echo(), main, status);
    report.comparison = Some(compare(cfg, &inputs, k, h, factor)?);
    report.benchmark = Some(BenchmarkResult {
        warmup_runs: warmup,
        timed_runs: runs,
        kriging: kriging_t,
        hymik: hymik_t,
        computational_factor: factor,
    });
    Ok(report)
}

/// Runs `job` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(RunError::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(t);
    }
    let pool = b.build().map_err(|e| RunError::Config(e.to_string()))?;
    Ok(pool.install(job))
}

/// Writes the report (or a machine-readable failure) and returns the exit code.
pub fn finish(cfg: &RunConfig, outcome: Result<Report, RunError>) -> i32 {
    let report = outcome.unwrap_or_else(|e| Report::failure(cfg.echo(), &arg_name(cfg.method), &e.kind(), e.to_string()));
    if let Some(err) = &report.error {
        eprintln!("error: {}", err.message);
    }
    match write_report(&cfg.out, &report) {
        Ok(()) => report.exit_code(),
        Err(e) => {
            eprintln!("error: cannot write {}: {e}", cfg.out.display());
            eprintln!("{}", to_json(&report));
            2
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub nt: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub order: u8,
    #[arg(long, default_value_t = 30)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
    pub intercept: f64,
    #[arg(long, default_value_t = 50.0)]
    pub tau_alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub tau_gamma: f64,
    #[arg(long, default_value_t = 17.0)]
    pub tau_delta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Counts CSV; the ground truth goes to <out>.truth.json
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_simulation(args: &SimulateArgs) -> Result<Truth, RunError> {
    let graph = load_graph(&args.graph)?;
    let cfg = SimulationConfig {
        graph: graph.graph,
        n_t: args.nt,
        temporal_order: args.order as usize,
        taus: Hyperparameters::new(args.tau_alpha, args.tau_gamma, args.tau_delta),
        intercept: args.intercept,
        n_replicates: args.replicates,
        seed: args.seed,
    };
    let data = simulate_dataset(&cfg)?;
    write_counts(&args.out, &data)?;
    let truth = Truth {
        seed: args.seed,
        n_t: data.n_t,
        n_s: data.n_s,
        temporal_order: cfg.temporal_order,
        n_replicates: cfg.n_replicates,
        intercept: data.intercept,
        tau_alpha: cfg.taus.tau_alpha,
        tau_gamma: cfg.taus.tau_gamma,
        tau_delta: cfg.taus.tau_delta,
        alpha: data.alpha,
        gamma: data.gamma,
        delta: data.delta,
        eta: data.eta,
    };
    let path = truth_path(&args.out);
    std::fs::write(&path, to_json(&truth)).map_err(|source| RunError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(truth)
}
