use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::model::Hyperparameters;

use super::newton::Engine;
use super::{InferenceError, IntStrategy};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridPoint {
    /// Log-scale hyperparameters.
    pub theta: Vec<f64>,
    /// Standardised coordinates.
    pub z: Vec<f64>,
    pub log_post: f64,
    /// Normalised so that Σ exp(log_weight)·delta = 1.
    pub log_weight: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub points: Vec<GridPoint>,
    pub mode_theta: Vec<f64>,
    /// Negative Hessian of the log posterior at the mode.
    pub curvature: DMatrix<f64>,
    /// log ∫ p̃(θ | y) dθ with the unnormalised log posterior.
    pub log_evidence: f64,
    pub evaluations: usize,
    /// Warm start for per-point approximations.
    pub mode_latent: Vec<f64>,
    pub warnings: Vec<String>,
}

impl HyperGrid {
    /// exp(log_weight)·Δ per point; sums to one.
    pub fn probabilities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.log_weight.exp() * p.delta).collect()
    }
}

struct Evaluator<'e, 'a> {
    engine: &'e Engine<'a>,
    count: std::sync::atomic::AtomicUsize,
}

impl Evaluator<'_, '_> {
    fn eval(&self, theta: &[f64], start: &[f64]) -> Result<(f64, Vec<f64>), InferenceError> {
        self.count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let family = self.engine.model.family();
        let h = Hyperparameters::from_theta(theta, family);
        let ga = self.engine.gaussian_approximation(&h, Some(start))?;
        if !ga.converged {
            return Err(InferenceError::NotConverged { iterations: ga.iterations });
        }
        let lp = self.engine.log_posterior_theta(&ga)?;
        if !lp.is_finite() {
            return Err(InferenceError::NonFinite);
        }
        Ok((lp, ga.mode))
    }

    /// Value or −∞ for points where the approximation fails.
    fn eval_or_neg_inf(&self, theta: &[f64], start: &[f64]) -> f64 {
        self.eval(theta, start).map(|r| r.0).unwrap_or(f64::NEG_INFINITY)
    }

    fn count(&self) -> usize {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// Central differences, evaluated in parallel from the same warm start.
    fn gradient(&self, theta: &[f64], start: &[f64], h: f64) -> Vec<f64> {
        let d = theta.len();
        let vals: Vec<f64> = (0..2 * d)
            .into_par_iter()
            .map(|k| {
                let mut t = theta.to_vec();
                t[k / 2] += if k % 2 == 0 { h } else { -h };
                self.eval_or_neg_inf(&t, start)
            })
            .collect();
        (0..d).map(|i| (vals[2 * i] - vals[2 * i + 1]) / (2.0 * h)).collect()
    }
}

/// Finds the mode of p̃(θ | y), its curvature, and an integration design.
pub fn explore_hyperparameters(engine: &Engine, init: &Hyperparameters) -> Result<HyperGrid, InferenceError> {
    let s = &engine.settings;
    let family = engine.model.family();
    let ev = Evaluator {
        engine,
        count: Default::default(),
    };
    let mut warnings = Vec::new();

    // quasi-Newton ascent on θ
    let mut theta = init.to_theta(family);
    let d = theta.len();
    let (mut f, mut mode) = ev.eval(&theta, &vec![0.0; engine.model.dim()])?;
    let mut g = ev.gradient(&theta, &mode, s.gradient_step);
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut converged = false;
    while ev.count() < s.max_evaluations {
        let gv = DVector::from_vec(g.clone());
        let mut p = &h_inv * &gv;
        if p.dot(&gv) <= 0.0 {
            h_inv = DMatrix::identity(d, d);
            p = gv.clone();
        }
        let pmax = p.amax();
        if pmax > s.max_step {
            p *= s.max_step / pmax;
        }
        let slope = p.dot(&gv);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let cand: Vec<f64> = theta.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok((fc, mc)) = ev.eval(&cand, &mode) {
                if fc >= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc, mc));
                    break;
                }
            }
            t *= 0.5;
            if ev.count() >= s.max_evaluations {
                break;
            }
        }
        let Some((cand, fc, mc)) = accepted else {
            // no ascent along the search direction: at the mode to noise level
            converged = true;
            break;
        };
        let change = fc - f;
        let g_new = ev.gradient(&cand, &mc, s.gradient_step);
        let sv = DVector::from_iterator(d, cand.iter().zip(&theta).map(|(a, b)| a - b));
        // ascent: curvature pair uses the negated gradient change
        let yv = DVector::from_iterator(d, g.iter().zip(&g_new).map(|(a, b)| a - b));
        let sy = sv.dot(&yv);
        if sy > 1e-10 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &sv * yv.transpose();
            let right = &eye - rho * &yv * sv.transpose();
            h_inv = &left * &h_inv * &right + rho * &sv * sv.transpose();
        }
        theta = cand;
        f = fc;
        mode = mc;
        g = g_new;
        if change.abs() < s.optimizer_tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(InferenceError::OptimizerStalled { evaluations: ev.count() });
    }

    // curvature by finite differences
    let hstep = s.hessian_step;
    let mut offsets: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut o = vec![0.0; d];
            o[i] = sign * hstep;
            offsets.push(o);
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut o = vec![0.0; d];
                o[i] = si * hstep;
                o[j] = sj * hstep;
                offsets.push(o);
            }
        }
    }
    let vals: Vec<f64> = offsets
        .par_iter()
        .map(|o| {
            let t: Vec<f64> = theta.iter().zip(o).map(|(a, b)| a + b).collect();
            ev.eval_or_neg_inf(&t, &mode)
        })
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::NonFinite);
    }
    let mut hess = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        hess[(i, i)] = -(vals[2 * i] - 2.0 * f + vals[2 * i + 1]) / (hstep * hstep);
    }
    let mut k = 2 * d;
    for i in 0..d {
        for j in i + 1..d {
            let v = -(vals[k] - vals[k + 1] - vals[k + 2] + vals[k + 3]) / (4.0 * hstep * hstep);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
            k += 4;
        }
    }
    let eig = SymmetricEigen::new(hess.clone());
    let mut lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let floor = 1e-6 * lambda.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-12);
    for l in lambda.iter_mut() {
        if *l <= floor {
            warnings.push(format!("non-positive curvature {l:.3e} at the θ mode; using {floor:.3e}"));
            *l = floor;
        }
    }
    let vecs = eig.eigenvectors.clone();
    let to_theta = |z: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| theta[i] + (0..d).map(|j| vecs[(i, j)] * z[j] / lambda[j].sqrt()).sum::<f64>())
            .collect()
    };
    let log_det_h: f64 = lambda.iter().map(|l| l.ln()).sum();

    let cut = s.log_weight_cut;
    let (mut points, volume_log) = match s.strategy {
        IntStrategy::Ccd => {
            let design = ccd_design(d, s.ccd_f0);
            let zs: Vec<Vec<f64>> = design.iter().map(|(z, _)| z.clone()).collect();
            let lps: Vec<f64> = zs.par_iter().map(|z| ev.eval_or_neg_inf(&to_theta(z), &mode)).collect();
            let pts: Vec<GridPoint> = design
                .into_iter()
                .zip(lps)
                .map(|((z, delta), lp)| GridPoint {
                    theta: to_theta(&z),
                    z,
                    log_post: lp,
                    log_weight: 0.0,
                    delta,
                })
                .collect();
            (pts, None)
        }
        IntStrategy::Grid => {
            let step = s.grid_step;
            // walk each axis until the log posterior falls by more than the cut
            let mut axis_drop: Vec<std::collections::BTreeMap<i64, f64>> = vec![Default::default(); d];
            let mut pts = vec![GridPoint {
                theta: theta.clone(),
                z: vec![0.0; d],
                log_post: f,
                log_weight: 0.0,
                delta: 1.0,
            }];
            for (i, drops) in axis_drop.iter_mut().enumerate() {
                drops.insert(0, 0.0);
                for dir in [1i64, -1] {
                    let mut j = dir;
                    loop {
                        let mut z = vec![0.0; d];
                        z[i] = j as f64 * step;
                        let lp = ev.eval_or_neg_inf(&to_theta(&z), &mode);
                        drops.insert(j, f - lp);
                        pts.push(GridPoint {
                            theta: to_theta(&z),
                            z,
                            log_post: lp,
                            log_weight: 0.0,
                            delta: 1.0,
                        });
                        if f - lp > cut || j.abs() > 20 {
                            break;
                        }
                        j += dir;
                    }
                }
            }
            // interior points predicted (additively) to lie within the cut
            let ranges: Vec<Vec<i64>> = axis_drop
                .iter()
                .map(|m| m.iter().filter(|(_, &v)| v <= cut).map(|(&k, _)| k).collect())
                .collect();
            let mut todo: Vec<Vec<i64>> = vec![vec![]];
            for r in &ranges {
                todo = todo
                    .into_iter()
                    .flat_map(|prefix| {
                        r.iter().map(move |&k| {
                            let mut p = prefix.clone();
                            p.push(k);
                            p
                        })
                    })
                    .collect();
            }
            todo.retain(|idx| {
                let nonzero = idx.iter().filter(|&&k| k != 0).count();
                let predicted: f64 = idx.iter().enumerate().map(|(i, k)| axis_drop[i][k]).sum();
                nonzero >= 2 && predicted <= cut
            });
            let extra: Vec<GridPoint> = todo
                .par_iter()
                .map(|idx| {
                    let z: Vec<f64> = idx.iter().map(|&k| k as f64 * step).collect();
                    let th = to_theta(&z);
                    let lp = ev.eval_or_neg_inf(&th, &mode);
                    GridPoint {
                        theta: th,
                        z,
                        log_post: lp,
                        log_weight: 0.0,
                        delta: 1.0,
                    }
                })
                .collect();
            pts.extend(extra);
            (pts, Some(d as f64 * step.ln() - 0.5 * log_det_h))
        }
    };
    let best = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    points.retain(|p| p.log_post.is_finite() && p.log_post >= best - cut);
    let lse = log_sum_exp(points.iter().map(|p| p.log_post + p.delta.ln()));
    for p in points.iter_mut() {
        p.log_weight = p.log_post - lse;
    }
    let log_evidence = match volume_log {
        Some(v) => lse + v,
        None => {
            // scale the design so an exactly Gaussian surface integrates exactly
            let reference = log_sum_exp(points.iter().map(|p| p.delta.ln() - 0.5 * p.z.iter().map(|v| v * v).sum::<f64>()));
            lse + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_h - reference
        }
    };
    Ok(HyperGrid {
        points,
        mode_theta: theta,
        curvature: hess,
        log_evidence,
        evaluations: ev.count(),
        mode_latent: mode,
        warnings,
    })
}

/// Central composite design on the sphere of radius f0·√d: centre, axial
/// points and the 2^d factorial corners, with moment-matching weights.
pub fn ccd_design(d: usize, f0: f64) -> Vec<(Vec<f64>, f64)> {
    let r = f0 * (d as f64).sqrt();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut z = vec![0.0; d];
            z[i] = sign * r;
            pts.push(z);
        }
    }
    if d >= 2 {
        for mask in 0..(1usize << d) {
            pts.push((0..d).map(|i| if mask >> i & 1 == 1 { -f0 } else { f0 }).collect());
        }
    }
    let n1 = pts.len() as f64;
    // Δ₁/Δ₀ chosen so the weighted design reproduces E|z|² = d under N(0, I)
    let delta1 = (d as f64 * f0 * f0 / 2.0).exp() / (n1 * (f0 * f0 - 1.0));
    let mut out = vec![(vec![0.0; d], 1.0)];
    out.extend(pts.into_iter().map(|z| (z, delta1)));
    out
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccd_reproduces_gaussian_second_moment() {
        for d in 1..=4 {
            let design = ccd_design(d, 1.1);
            let w: Vec<f64> = design
                .iter()
                .map(|(z, delta)| delta * (-0.5 * z.iter().map(|v| v * v).sum::<f64>()).exp())
                .collect();
            let total: f64 = w.iter().sum();
            let second: f64 = design
                .iter()
                .zip(&w)
                .map(|((z, _), wi)| wi * z.iter().map(|v| v * v).sum::<f64>())
                .sum();
            assert!((second / total - d as f64).abs() < 1e-12, "d = {d}");
            let n_expected = 1 + 2 * d + if d >= 2 { 1 << d } else { 0 };
            assert_eq!(design.len(), n_expected);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp([1000.0, 1000.0].into_iter());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
