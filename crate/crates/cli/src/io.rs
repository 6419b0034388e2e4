//! Graph and count-table ingestion, simulated-data output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hymik_core::likelihood::{Family, ObservationSet};
use hymik_core::simulate::SimulatedData;
use hymik_core::structures::{Graph, GraphError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    ParseError { path: String, line: usize, message: String },
    #[error("{path}: node {from} lists {to} as a neighbour but not the reverse")]
    AsymmetricAdjacency { path: String, from: usize, to: usize },
    #[error("{path}: invalid graph: {message}")]
    InvalidGraph { path: String, message: String },
    #[error("{path}: no row for time {time}, region {region}")]
    MissingCell { path: String, time: usize, region: usize },
    #[error("{path}, line {line}: negative count {count}")]
    NegativeCount { path: String, line: usize, count: f64 },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl DataError {
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Io { .. } => "Io",
            DataError::ParseError { .. } => "ParseError",
            DataError::AsymmetricAdjacency { .. } => "AsymmetricAdjacency",
            DataError::InvalidGraph { .. } => "InvalidGraph",
            DataError::MissingCell { .. } => "MissingCell",
            DataError::NegativeCount { .. } => "NegativeCount",
            DataError::Invalid { .. } => "InvalidData",
        }
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: Graph,
    pub components: usize,
}

pub fn load_graph(path: &Path) -> Result<LoadedGraph, DataError> {
    let text = read(path)?;
    let p = path.display().to_string();
    let graph = Graph::parse(&text).map_err(|e| match e {
        GraphError::Parse { line, message } => DataError::ParseError { path: p.clone(), line, message },
        GraphError::AsymmetricAdjacency { from, to } => DataError::AsymmetricAdjacency { path: p.clone(), from, to },
        other => DataError::InvalidGraph {
            path: p.clone(),
            message: other.to_string(),
        },
    })?;
    let components = graph.component_count();
    Ok(LoadedGraph { graph, components })
}

/// Counts table: one observation set in time-major cell order.
#[derive(Debug, Clone)]
pub struct CountData {
    pub obs: ObservationSet,
    pub n_t: usize,
    pub n_s: usize,
}

#[derive(Debug, Deserialize)]
struct CountRow {
    time: usize,
    region: usize,
    count: f64,
    exposure: f64,
    #[serde(default)]
    replicate: Option<usize>,
}

/// Cumulative series to increments; decreases (reporting corrections) become 0.
pub fn cumulative_to_daily(series: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    series
        .iter()
        .map(|&c| {
            let d = (c - prev).max(0.0);
            prev = c;
            d
        })
        .collect()
}

/// Reads `time,region,count,exposure[,replicate]` rows. Regions are 0-based
/// indices into the graph, times run densely over 1..=n_T.
pub fn load_counts(path: &Path, n_regions: usize, family: Family, cumulative: bool) -> Result<CountData, DataError> {
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&p, e))?;
    // (time, region) -> replicate -> (count, exposure, line)
    let mut cells: BTreeMap<(usize, usize), BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    let mut n_t = 0;
    for (i, row) in reader.deserialize::<CountRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(&p, e))?;
        if row.time == 0 {
            return Err(DataError::ParseError {
                path: p,
                line,
                message: "times start at 1".into(),
            });
        }
        if row.region >= n_regions {
            return Err(DataError::ParseError {
                path: p,
                line,
                message: format!("region {} outside the graph's 0..{n_regions}", row.region),
            });
        }
        if !row.count.is_finite() || row.count.fract() != 0.0 {
            return Err(DataError::ParseError {
                path: p,
                line,
                message: format!("count {} is not an integer", row.count),
            });
        }
        if row.count < 0.0 {
            return Err(DataError::NegativeCount {
                path: p,
                line,
                count: row.count,
            });
        }
        if !(row.exposure > 0.0 && row.exposure.is_finite()) {
            return Err(DataError::ParseError {
                path: p,
                line,
                message: format!("exposure {} must be positive", row.exposure),
            });
        }
        n_t = n_t.max(row.time);
        let rep = row.replicate.unwrap_or(0);
        let slot = cells.entry((row.time, row.region)).or_default();
        if slot.insert(rep, (row.count, row.exposure, line)).is_some() {
            return Err(DataError::ParseError {
                path: p,
                line,
                message: format!("duplicate row for time {}, region {}, replicate {rep}", row.time, row.region),
            });
        }
    }
    if cells.is_empty() {
        return Err(DataError::Invalid {
            path: p,
            message: "no data rows".into(),
        });
    }
    let reps: Vec<usize> = cells.values().next().expect("non-empty").keys().copied().collect();
    let mut counts = vec![Vec::new(); n_t * n_regions];
    let mut exposure = vec![0.0; n_t * n_regions];
    for t in 1..=n_t {
        for s in 0..n_regions {
            let slot = cells.get(&(t, s)).ok_or(DataError::MissingCell {
                path: p.clone(),
                time: t,
                region: s,
            })?;
            if slot.keys().copied().ne(reps.iter().copied()) {
                return Err(DataError::Invalid {
                    path: p,
                    message: format!("time {t}, region {s} has a different replicate set"),
                });
            }
            let (_, e0, line0) = slot.values().next().expect("non-empty");
            if slot.values().any(|(_, e, _)| e != e0) {
                return Err(DataError::ParseError {
                    path: p,
                    line: *line0,
                    message: "replicates of one cell must share the exposure".into(),
                });
            }
            let cell = (t - 1) * n_regions + s;
            counts[cell] = slot.values().map(|(c, _, _)| *c).collect();
            exposure[cell] = *e0;
        }
    }
    if cumulative {
        for s in 0..n_regions {
            for r in 0..reps.len() {
                let series: Vec<f64> = (0..n_t).map(|t| counts[t * n_regions + s][r]).collect();
                for (t, d) in cumulative_to_daily(&series).into_iter().enumerate() {
                    counts[t * n_regions + s][r] = d;
                }
            }
        }
    }
    let obs = ObservationSet::new(family, counts, exposure).map_err(|e| DataError::Invalid {
        path: p,
        message: e.to_string(),
    })?;
    Ok(CountData { obs, n_t, n_s: n_regions })
}

fn csv_error(path: &str, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    DataError::ParseError {
        path: path.to_string(),
        line,
        message: e.to_string(),
    }
}

/// Writes simulated counts, one row per replicate.
pub fn write_counts(path: &Path, data: &SimulatedData) -> Result<(), DataError> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(&p, e))?;
    w.write_record(["time", "region", "count", "exposure", "replicate"])
        .map_err(|e| csv_error(&p, e))?;
    for t in 0..data.n_t {
        for s in 0..data.n_s {
            let cell = t * data.n_s + s;
            let e = data.obs.exposure[cell];
            for (r, c) in data.obs.replicates(cell).iter().enumerate() {
                w.write_record([
                    (t + 1).to_string(),
                    s.to_string(),
                    format!("{c}"),
                    format!("{e}"),
                    r.to_string(),
                ])
                .map_err(|e| csv_error(&p, e))?;
            }
        }
    }
    w.flush().map_err(|source| DataError::Io { path: p, source })
}

/// Ground truth written next to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub n_t: usize,
    pub n_s: usize,
    pub temporal_order: usize,
    pub n_replicates: usize,
    pub intercept: f64,
    pub tau_alpha: f64,
    pub tau_gamma: f64,
    pub tau_delta: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
}

/// `data.csv` -> `data.truth.json`
pub fn truth_path(data: &Path) -> std::path::PathBuf {
    data.with_extension("truth.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn path_graph_degrees() {
        let f = file("3\n0 1 1\n1 2 0 2\n2 1 1\n");
        let g = load_graph(f.path()).unwrap();
        assert_eq!((0..3).map(|s| g.graph.degree(s)).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(g.components, 1);
    }

    #[test]
    fn asymmetric_graph() {
        let f = file("6\n0 0\n1 0\n2 1 5\n3 0\n4 0\n5 0\n");
        assert!(matches!(load_graph(f.path()), Err(DataError::AsymmetricAdjacency { .. })));
    }

    #[test]
    fn parse_error_has_line() {
        let f = file("2\n0 1 1\n1 x 0\n");
        match load_graph(f.path()) {
            Err(DataError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cumulative_clamps() {
        assert_eq!(cumulative_to_daily(&[3.0, 5.0, 4.0]), vec![3.0, 2.0, 0.0]);
        let f = file("time,region,count,exposure\n1,0,3,1\n2,0,5,1\n3,0,4,1\n");
        let d = load_counts(f.path(), 1, Family::Poisson, true).unwrap();
        assert_eq!((0..3).map(|c| d.obs.cell_sum(c)).collect::<Vec<_>>(), vec![3.0, 2.0, 0.0]);
    }

    #[test]
    fn missing_cell_and_negative_count() {
        let f = file("time,region,count,exposure\n1,0,1,1\n1,1,1,1\n2,0,1,1\n");
        match load_counts(f.path(), 2, Family::Poisson, false) {
            Err(DataError::MissingCell { time, region, .. }) => assert_eq!((time, region), (2, 1)),
            other => panic!("{other:?}"),
        }
        let f = file("time,region,count,exposure\n1,0,-1,1\n");
        assert!(matches!(
            load_counts(f.path(), 1, Family::Poisson, false),
            Err(DataError::NegativeCount { line: 2, .. })
        ));
    }

    #[test]
    fn replicate_column() {
        let f = file("time,region,count,exposure,replicate\n1,0,1,2,0\n1,0,4,2,1\n");
        let d = load_counts(f.path(), 1, Family::Poisson, false).unwrap();
        assert_eq!(d.obs.replicates(0), &[1.0, 4.0]);
        assert_eq!(d.obs.n_observations(), 2);
    }
}
