//! Gaussian responses make the Laplace approximation exact, so the engine
//! must reproduce closed-form conditional-Gaussian results.

use hymik_core::inference::{Engine, Settings};
use hymik_core::likelihood::{Family, ObservationSet};
use hymik_core::model::{build_latent_model, Hyperparameters, InteractionConstraints, LatentModel, Method, ModelSpec};
use hymik_core::structures::Graph;
use nalgebra::{DMatrix, DVector};

const PREC: f64 = 4.0;

fn toy_data(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.8 + (i as f64 * 0.91).sin() + 0.3 * (i as f64 * 0.17).cos()).collect()
}

fn model(method: Method, constraints: InteractionConstraints, order: usize) -> LatentModel {
    let mut spec = ModelSpec::new(4, constraints, method, Family::Gaussian { precision: PREC });
    spec.temporal_order = order;
    build_latent_model(&Graph::path(6), spec).unwrap()
}

fn kernel_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let eig = (a.transpose() * a + DMatrix::identity(n, n)).symmetric_eigen();
    let cols: Vec<_> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| (*l - 1.0).abs() < 1e-9)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

fn log_det(m: DMatrix<f64>) -> f64 {
    m.cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

/// Marginal log density of y and posterior mean, worked on an orthonormal
/// basis V of ker A so that near-null prior directions stay well conditioned.
fn dense_oracle(m: &LatentModel, h: &Hyperparameters, y: &[f64]) -> (f64, DVector<f64>) {
    let q = m.prior_precision(h).to_dense();
    let v = kernel_basis(&m.kriged.to_dense());
    let d = m.design.to_dense();
    let yv = DVector::from_column_slice(y);
    let qv = v.transpose() * &q * &v;
    let post = &qv + v.transpose() * d.transpose() * &d * &v * PREC;
    let b = v.transpose() * d.transpose() * &yv * PREC;
    let u = post.clone().cholesky().unwrap().solve(&b);
    let n = y.len() as f64;
    let logp = 0.5 * (log_det(qv) - log_det(post)) + 0.5 * n * (PREC / (2.0 * std::f64::consts::PI)).ln()
        - 0.5 * PREC * yv.dot(&yv)
        + 0.5 * b.dot(&u);
    (logp, &v * u)
}

#[test]
fn laplace_is_exact_for_gaussian_response() {
    let h = Hyperparameters::new(2.0, 0.7, 3.0);
    for (c, order) in [(InteractionConstraints::Gc, 1), (InteractionConstraints::Gc, 2), (InteractionConstraints::Sc, 2)] {
        let m = model(Method::Kriging, c, order);
        let y = toy_data(m.n_cells());
        let obs = ObservationSet::single(m.family(), y.clone(), vec![1.0; y.len()]).unwrap();
        let engine = Engine::new(&m, &obs, Settings::default()).unwrap();
        let ga = engine.gaussian_approximation(&h, None).unwrap();
        assert_eq!(ga.iterations, 1);
        let lp = engine.log_posterior_theta(&ga).unwrap();
        let theta = h.to_theta(m.family());
        let ours = lp - engine.hyperprior.log_density(&theta) + m.structure_log_pdet().unwrap();
        let (exact, mean) = dense_oracle(&m, &h, &y);
        assert!((ours - exact).abs() < 1e-6, "{c:?} order {order}: {ours} vs {exact}");
        let scale = mean.amax();
        for i in 0..m.dim() {
            assert!((ga.mode[i] - mean[i]).abs() < 1e-7 * scale, "{c:?} {i}");
        }
    }
}

#[test]
fn hybrid_matches_kriging_for_gaussian_response() {
    let h = Hyperparameters::new(2.0, 0.7, 3.0);
    for (c, order) in [(InteractionConstraints::Gc, 1), (InteractionConstraints::Sc, 2)] {
        let mk = model(Method::Kriging, c, order);
        let mh = model(Method::Hymik, c, order);
        let y = toy_data(mk.n_cells());
        let obs = ObservationSet::single(mk.family(), y.clone(), vec![1.0; y.len()]).unwrap();
        let ek = Engine::new(&mk, &obs, Settings::default()).unwrap();
        let eh = Engine::new(&mh, &obs, Settings::default()).unwrap();
        let gk = ek.gaussian_approximation(&h, None).unwrap();
        let gh = eh.gaussian_approximation(&h, None).unwrap();
        let (_, mean) = dense_oracle(&mk, &h, &y);
        let scale = mean.amax();
        for i in 0..mk.reported_dim() {
            assert!((gh.mode[i] - gk.mode[i]).abs() < 1e-5 * scale, "{c:?} {i}: {} vs {}", gh.mode[i], gk.mode[i]);
            assert!((gh.mode[i] - mean[i]).abs() < 1e-5 * scale);
        }
        let lk = ek.log_posterior_theta(&gk).unwrap();
        let lh = eh.log_posterior_theta(&gh).unwrap();
        assert!((lk - lh).abs() < 1e-5, "{c:?}: {lk} vs {lh}");
        for hh in [Hyperparameters::new(20.0, 0.1, 0.5), Hyperparameters::new(0.3, 5.0, 30.0)] {
            let a = ek.log_posterior_theta(&ek.gaussian_approximation(&hh, None).unwrap()).unwrap();
            let b = eh.log_posterior_theta(&eh.gaussian_approximation(&hh, None).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-5, "{c:?}: {a} vs {b}");
        }
    }
}

