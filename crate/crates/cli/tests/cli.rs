use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hymik::report::{read_report, Status};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hymik"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn fit(args: &[&str], data_file: &Path, graph: &Path, out: &Path) -> Output {
    bin()
        .arg("fit")
        .args(args)
        .arg("--data")
        .arg(data_file)
        .arg("--graph")
        .arg(graph)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn cumulative_county_sample_uses_temporal_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = fit(
        &["--constraints", "gc", "--method", "hymik", "--split", "temporal", "--cumulative", "--scale"],
        &data("covid_sample.csv"),
        &data("counties11.graph"),
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_report(&out).unwrap();
    assert_eq!(r.status, Status::Ok);
    let split = r.split.expect("HyMiK reports its split");
    assert_eq!(split.policy, "temporal_first");
    assert_eq!((split.k1, split.k2), (500, 10));
    assert_eq!(r.latent.unwrap().means.len(), 1 + 500 + 11 + 5500);
    assert!(r.max_constraint_violation.unwrap() <= 1e-6);
}

#[test]
fn missing_cell_gives_machine_readable_failure() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.graph");
    std::fs::write(&graph, "2\n0 1 1\n1 1 0\n").unwrap();
    let counts = dir.path().join("c.csv");
    std::fs::write(&counts, "time,region,count,exposure\n1,0,3,1\n1,1,2,1\n2,0,4,1\n").unwrap();
    let out = dir.path().join("r.json");
    let o = fit(&[], &counts, &graph, &out);
    assert_eq!(o.status.code(), Some(2));
    let r = read_report(&out).unwrap();
    assert_eq!(r.status, Status::Error);
    assert_eq!(r.error.unwrap().kind, "MissingCell");
}

#[test]
fn asymmetric_graph_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.graph");
    std::fs::write(&graph, "3\n0 1 1\n1 1 2\n2 1 1\n").unwrap();
    let out = dir.path().join("r.json");
    let o = fit(&[], &data("covid_sample.csv"), &graph, &out);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(read_report(&out).unwrap().error.unwrap().kind, "AsymmetricAdjacency");
}

#[test]
fn thread_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.graph");
    std::fs::write(&graph, hymik_core::structures::Graph::grid(2, 3).to_text()).unwrap();
    let counts = dir.path().join("c.csv");
    let sim = bin()
        .args(["simulate", "--nt", "4", "--replicates", "2", "--seed", "3", "--graph"])
        .arg(&graph)
        .arg("--out")
        .arg(&counts)
        .output()
        .unwrap();
    assert!(sim.status.success());
    assert!(dir.path().join("c.truth.json").exists());

    let out = dir.path().join("r.json");
    let o = bin()
        .env("HYMIK_THREADS", "3")
        .args(["fit", "--threads", "1", "--data"])
        .arg(&counts)
        .arg("--graph")
        .arg(&graph)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_report(&out).unwrap().config["threads"], "1");

    let o = bin()
        .env("HYMIK_THREADS", "0")
        .args(["fit", "--data"])
        .arg(&counts)
        .arg("--graph")
        .arg(&graph)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_option_fails_before_compute() {
    let o = bin().args(["fit", "--method", "inla"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("inla"));
}
