use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hymik_bench::{dense_constraints, lattice_problem};
use hymik_core::constraints::Kriging;
use hymik_core::inference::{Engine, Settings};
use hymik_core::model::{Hyperparameters, Method};
use hymik_core::sparse::cholesky;
use hymik_core::structures::{build_icar_structure, build_interaction_structure, build_rw_structure, Graph};

fn factorisation(c: &mut Criterion) {
    let g = Graph::triangulated_lattice(32, 17, 7);
    let r = build_interaction_structure(&build_rw_structure(10, 2).unwrap(), &build_icar_structure(&g).unwrap());
    let q = r.matrix.add_diagonal(1.0);
    let f = cholesky(&q).unwrap();
    c.bench_function("refactor rw2 x icar (5440)", |b| b.iter(|| f.refactor(&q).unwrap()));
    c.bench_function("inverse diagonal rw2 x icar (5440)", |b| b.iter(|| f.inverse_diagonal()));
}

fn kriging(c: &mut Criterion) {
    let n = 5000;
    let g = Graph::grid(50, 100);
    let q = build_icar_structure(&g).unwrap().matrix.add_diagonal(1.0);
    let f = cholesky(&q).unwrap();
    let mut group = c.benchmark_group("kriging n=5000");
    group.sample_size(10);
    for k in [20, 100] {
        let a = dense_constraints(k, n);
        group.bench_with_input(BenchmarkId::from_parameter(k), &a, |b, a| b.iter(|| Kriging::new(a, &f).unwrap()));
    }
    group.finish();
}

fn newton(c: &mut Criterion) {
    let mut group = c.benchmark_group("gaussian approximation 10 x 200");
    group.sample_size(10);
    for method in [Method::Kriging, Method::Hymik] {
        let (model, obs) = lattice_problem(10, 20, 10, method);
        let engine = Engine::new(&model, &obs, Settings::default()).unwrap();
        let h = Hyperparameters::new(50.0, 10.0, 17.0);
        group.bench_function(format!("{method:?}"), |b| b.iter(|| engine.gaussian_approximation(&h, None).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, factorisation, kriging, newton);
criterion_main!(benches);
