//! Report documents and their JSON encoding.
//!
//! Floats are written as `d.dddddddddddddddde±x` (17 significant digits),
//! which parses back to the same f64, so read-then-write is byte-identical.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use hymik_core::inference::{LatentSummary, PhaseTimes, Summary};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
    ConstraintViolation,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

/// Constraint split used by HyMiK: k1 rows absorbed by the projection,
/// k2 left for kriging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub policy: String,
    pub k1: usize,
    pub k2: usize,
}

/// Posterior summary of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub split: Option<SplitInfo>,
    pub hyper: Vec<Summary>,
    pub fixed: Vec<Summary>,
    pub latent: LatentSummary,
    pub avg_marginal_loglik: Option<f64>,
    pub marginal_loglik_corrected: bool,
    pub converged: bool,
    pub max_constraint_violation: f64,
    pub grid_points: usize,
    pub timings: Option<PhaseTimes>,
    pub warnings: Vec<String>,
}

/// Wall-clock seconds for one method over the timed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    /// Median over the timed runs.
    pub total: f64,
    /// Phases of the median run.
    pub phases: PhaseTimes,
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub kriging: MethodTiming,
    pub hymik: MethodTiming,
    /// Kriging time over HyMiK time.
    pub computational_factor: f64,
}

/// Paired interaction means for a kriging-vs-HyMiK scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub kriging: MethodResult,
    pub hymik: MethodResult,
    /// Interaction block, time-major.
    pub paired_delta_means: PairedMeans,
    pub delta_correlation: f64,
    pub delta_max_abs_difference: f64,
    /// Kriging time over HyMiK time; wall-clock, so only with `--timings`.
    pub computational_factor: Option<f64>,
    pub scatter_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedMeans {
    pub kriging: Vec<f64>,
    pub hymik: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub status: Status,
    pub config: BTreeMap<String, String>,
    pub method: String,
    pub split: Option<SplitInfo>,
    pub hyper: Vec<Summary>,
    pub fixed: Vec<Summary>,
    pub latent: Option<LatentSummary>,
    pub avg_marginal_loglik: Option<f64>,
    pub marginal_loglik_corrected: bool,
    pub converged: bool,
    pub max_constraint_violation: Option<f64>,
    pub grid_points: usize,
    pub timings: Option<PhaseTimes>,
    pub warnings: Vec<String>,
    pub comparison: Option<Comparison>,
    pub benchmark: Option<BenchmarkResult>,
    pub error: Option<ErrorInfo>,
}

impl Report {
    /// Report for a run that failed before producing a posterior.
    pub fn failure(config: BTreeMap<String, String>, method: &str, kind: &str, message: String) -> Self {
        Self {
            status: Status::Error,
            config,
            method: method.to_string(),
            split: None,
            hyper: Vec::new(),
            fixed: Vec::new(),
            latent: None,
            avg_marginal_loglik: None,
            marginal_loglik_corrected: false,
            converged: false,
            max_constraint_violation: None,
            grid_points: 0,
            timings: None,
            warnings: Vec::new(),
            comparison: None,
            benchmark: None,
            error: Some(ErrorInfo {
                kind: kind.to_string(),
                message,
            }),
        }
    }

    pub fn from_result(config: BTreeMap<String, String>, r: &MethodResult, status: Status) -> Self {
        Self {
            status,
            config,
            method: r.method.clone(),
            split: r.split.clone(),
            hyper: r.hyper.clone(),
            fixed: r.fixed.clone(),
            latent: Some(r.latent.clone()),
            avg_marginal_loglik: r.avg_marginal_loglik,
            marginal_loglik_corrected: r.marginal_loglik_corrected,
            converged: r.converged,
            max_constraint_violation: Some(r.max_constraint_violation),
            grid_points: r.grid_points,
            timings: r.timings,
            warnings: r.warnings.clone(),
            comparison: None,
            benchmark: None,
            error: None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => 0,
            Status::NotConverged | Status::ConstraintViolation => 1,
            Status::Error => 2,
        }
    }
}

/// Pretty-printed JSON with every float at 17 significant digits.
#[derive(Debug, Default)]
pub struct FixedDigits {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits::default());
    value.serialize(&mut ser).expect("in-memory serialisation");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

pub fn write_report(path: &Path, report: &Report) -> io::Result<()> {
    std::fs::write(path, to_json(report))
}

pub fn read_report(path: &Path) -> io::Result<Report> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(io::Error::other)
}
