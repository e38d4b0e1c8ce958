//! Exponential tilting: the dual problem min_λ (1/n) Σ exp(λ'g_i), the implied
//! probabilities, the log-ETEL value, the ETEL point estimator and the plug-in
//! sandwich matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BetelError, Result};
use crate::moment_model::{MomentMatrix, MomentModel, ParameterPoint};
use crate::optim::nelder_mead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    HullFailure,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltingOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub lambda_bound: f64,
    pub objective_floor: f64,
}

impl Default for TiltingOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-10, max_iter: 100, lambda_bound: 1e4, objective_floor: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtelSolution {
    pub lambda_hat: Vec<f64>,
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub log_etel: f64,
    /// ∞-norm of Σ p_i g_i at `lambda_hat`.
    pub gradient_norm: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl EtelSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Tilted state at one λ: log f(λ), normalized weights, Σ p_i g_i.
struct Tilt {
    log_obj: f64,
    log_etel: f64,
    weights: Vec<f64>,
    grad: Vec<f64>,
}

fn tilt(g: &MomentMatrix, lambda: &[f64]) -> Tilt {
    let n = g.n_rows();
    let d = g.n_cols();
    let a: Vec<f64> =
        (0..n).map(|i| g.row(i).iter().zip(lambda).map(|(x, l)| x * l).sum()).collect();
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = a.iter().map(|ai| (ai - m).exp()).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let mut grad = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (acc, x) in grad.iter_mut().zip(g.row(i)) {
            *acc += w * x;
        }
    }
    let sum_a: f64 = a.iter().map(|ai| ai - m).sum();
    Tilt {
        log_obj: m + (s / n as f64).ln(),
        log_etel: sum_a - n as f64 * s.ln(),
        weights,
        grad,
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton direction for log f, −(Σ p g g' − ḡḡ')⁻¹ ḡ, or −ḡ when the system
/// is singular. Using the Hessian of log f rather than f keeps steps long
/// while a few extreme rows dominate the weights.
fn newton_direction(g: &MomentMatrix, t: &Tilt) -> Vec<f64> {
    let d = g.n_cols();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (i, w) in t.weights.iter().enumerate() {
        let row = g.row(i);
        for r in 0..d {
            let wr = w * row[r];
            for c in 0..=r {
                h[(r, c)] += wr * row[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            h[(r, c)] -= t.grad[r] * t.grad[c];
            h[(c, r)] = h[(r, c)];
        }
    }
    let rhs = DVector::from_column_slice(&t.grad);
    match h.cholesky() {
        Some(ch) => {
            let step = ch.solve(&rhs);
            if step.iter().all(|x| x.is_finite()) {
                return step.iter().map(|x| -x).collect();
            }
            t.grad.iter().map(|x| -x).collect()
        }
        None => t.grad.iter().map(|x| -x).collect(),
    }
}

pub fn solve_tilting(g: &MomentMatrix) -> EtelSolution {
    solve_tilting_with(g, &TiltingOptions::default())
}

/// Newton's method on the dual from λ = 0 with Armijo halving on log f.
pub fn solve_tilting_with(g: &MomentMatrix, opts: &TiltingOptions) -> EtelSolution {
    let d = g.n_cols();
    let n = g.n_rows();
    if n == 0 || d == 0 {
        return EtelSolution {
            lambda_hat: vec![0.0; d],
            weights: vec![],
            log_etel: f64::NEG_INFINITY,
            gradient_norm: f64::INFINITY,
            status: SolveStatus::HullFailure,
            iterations: 0,
        };
    }
    let scale = g.as_slice().iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let log_floor = opts.objective_floor.ln();
    let mut lambda = vec![0.0; d];
    let mut state = tilt(g, &lambda);
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gn = inf_norm(&state.grad);
        if gn <= opts.grad_tol {
            status = SolveStatus::Converged;
            break;
        }
        let norm = lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > opts.lambda_bound || state.log_obj < log_floor {
            status = SolveStatus::HullFailure;
            break;
        }
        iterations += 1;
        let dir = newton_direction(g, &state);
        let slope: f64 = dir.iter().zip(&state.grad).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let trial: Vec<f64> = lambda.iter().zip(&dir).map(|(l, s)| l + t * s).collect();
            let ts = tilt(g, &trial);
            let armijo = ts.log_obj <= state.log_obj + 1e-4 * t * slope;
            // Near the optimum the predicted decrease is below the rounding
            // error of log f; judge the step by the gradient instead.
            let near = -slope <= 1e-10 * (1.0 + state.log_obj.abs());
            if ts.log_obj.is_finite() && (armijo || (near && inf_norm(&ts.grad) < gn)) {
                next = Some((trial, ts));
                break;
            }
            t *= 0.5;
        }
        match next {
            Some((l, s)) => {
                lambda = l;
                state = s;
            }
            None => {
                // No decrease is representable: accept if the gradient is at
                // the rounding floor of the moment scale.
                if gn <= 1e-8 * scale {
                    status = SolveStatus::Converged;
                }
                break;
            }
        }
    }
    if status == SolveStatus::Converged && inf_norm(&state.grad) > 0.0 {
        let dir = newton_direction(g, &state);
        let trial: Vec<f64> = lambda.iter().zip(&dir).map(|(l, s)| l + s).collect();
        let ts = tilt(g, &trial);
        if ts.log_obj <= state.log_obj && inf_norm(&ts.grad) <= inf_norm(&state.grad) {
            lambda = trial;
            state = ts;
        }
    }
    let gradient_norm = inf_norm(&state.grad);
    let log_etel =
        if status == SolveStatus::Converged { state.log_etel } else { f64::NEG_INFINITY };
    EtelSolution { lambda_hat: lambda, weights: state.weights, log_etel, gradient_norm, status, iterations }
}

/// log p(x | ψ) = Σ log p_i*(ψ); −∞ unless the dual converged.
pub fn log_etel(
    model: &MomentModel,
    psi: &ParameterPoint,
    data: &Dataset,
) -> Result<(f64, EtelSolution)> {
    let g = model.eval_moments(psi, data)?;
    let sol = solve_tilting(&g);
    Ok((sol.log_etel, sol))
}

/// Log-ETEL at a flat ψ, with every failure (hull, overflow, dimension)
/// mapped to −∞. This is the likelihood the samplers see.
pub fn log_etel_value(model: &MomentModel, psi: &[f64], data: &Dataset) -> f64 {
    match model.eval_moments_flat(psi, data) {
        Ok(g) => solve_tilting(&g).log_etel,
        Err(_) => f64::NEG_INFINITY,
    }
}

fn refine_coordinatewise<F: Fn(&[f64]) -> f64>(f: &F, x: &mut [f64], fx: &mut f64) {
    for sweep in 0..6 {
        let rel = 1e-2 * 0.1f64.powi(sweep);
        for j in 0..x.len() {
            let h = rel * x[j].abs().max(1.0);
            let x0 = x[j];
            x[j] = x0 - h;
            let fm = f(x);
            x[j] = x0 + h;
            let fp = f(x);
            x[j] = x0;
            let curv = fp - 2.0 * *fx + fm;
            if !(curv > 0.0) || !fm.is_finite() || !fp.is_finite() {
                continue;
            }
            let step = -0.5 * h * (fp - fm) / curv;
            if step.abs() > 4.0 * h {
                continue;
            }
            x[j] = x0 + step;
            let fnew = f(x);
            if fnew < *fx {
                *fx = fnew;
            } else {
                x[j] = x0;
            }
        }
    }
}

/// Maximizer of ψ ↦ log-ETEL near `start` (Nelder-Mead, then coordinate-wise
/// quadratic polishing). Falls back to the model's own starting point and
/// scaled variants of `start` when `start` has no finite value.
pub fn etel_estimate(
    model: &MomentModel,
    data: &Dataset,
    start: &ParameterPoint,
) -> Result<ParameterPoint> {
    let objective = |x: &[f64]| -log_etel_value(model, x, data);
    let mut candidates = vec![start.to_vec()];
    if let Ok(p) = model.initial_point(data) {
        candidates.push(p.to_vec());
    }
    for s in [0.5, 0.0] {
        candidates.push(start.to_vec().iter().map(|x| x * s).collect());
    }
    let (x0, f0) = candidates
        .into_iter()
        .filter(|c| c.len() == model.dim())
        .map(|c| {
            let v = objective(&c);
            (c, v)
        })
        .find(|(_, v)| v.is_finite())
        .ok_or_else(|| {
            BetelError::EstimationFailed("no starting point with a finite log-ETEL".into())
        })?;
    let dim = x0.len();
    let mut best = (x0, f0);
    for _ in 0..3 {
        let steps: Vec<f64> = best.0.iter().map(|x| 0.1 * x.abs().max(1.0)).collect();
        let m = nelder_mead(objective, &best.0, &steps, 600 * dim.max(1), 1e-13);
        let improved = m.value < best.1 - 1e-9 * (1.0 + best.1.abs());
        if m.value <= best.1 {
            best = (m.x, m.value);
        }
        if !improved {
            break;
        }
    }
    let (mut x, mut fx) = best;
    refine_coordinatewise(&objective, &mut x, &mut fx);
    if fx > f0 {
        return Err(BetelError::EstimationFailed("optimizer left the starting value".into()));
    }
    model.point_from_slice(&x)
}

/// Γ̂ (d × dim ψ), Δ̂ (d × d) and Σ̂ = (Γ̂'Δ̂⁻¹Γ̂)⁻¹ at one ψ.
#[derive(Debug, Clone)]
pub struct SandwichEstimates {
    pub gamma_hat: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
}

const RANK_TOL: f64 = 1e-12;

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > RANK_TOL * max && m.clone().cholesky().is_some()
}

pub fn plugin_sandwich(
    model: &MomentModel,
    psi: &ParameterPoint,
    data: &Dataset,
) -> Result<SandwichEstimates> {
    let g = model.eval_moments(psi, data)?;
    let (n, d) = (g.n_rows(), g.n_cols());
    let p = model.p();
    let dim = model.dim();
    let mut gamma = DMatrix::<f64>::zeros(d, dim);
    let flat = psi.to_vec();
    for j in 0..p {
        let h = 1e-6 * flat[j].abs().max(1.0);
        let mut up = flat.clone();
        up[j] += h;
        let mut down = flat.clone();
        down[j] -= h;
        let mu = model.eval_moments_flat(&up, data)?.column_means();
        let md = model.eval_moments_flat(&down, data)?.column_means();
        for r in 0..d {
            gamma[(r, j)] = (mu[r] - md[r]) / (2.0 * h);
        }
    }
    for (k, coord) in model.free_coordinates().into_iter().enumerate() {
        gamma[(coord, p + k)] = -1.0;
    }
    let mut delta = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = g.row(i);
        for r in 0..d {
            for c in 0..d {
                delta[(r, c)] += row[r] * row[c];
            }
        }
    }
    delta /= n as f64;
    if !well_conditioned(&delta) {
        return Err(BetelError::SingularDelta);
    }
    let delta_inv_gamma = delta.clone().cholesky().expect("checked").solve(&gamma);
    let info = gamma.transpose() * delta_inv_gamma;
    let info = 0.5 * (&info + info.transpose());
    if !well_conditioned(&info) {
        return Err(BetelError::RankDeficientGamma);
    }
    let sigma = info.cholesky().expect("checked").inverse();
    let sigma_hat = 0.5 * (&sigma + sigma.transpose());
    Ok(SandwichEstimates { gamma_hat: gamma, delta_hat: delta, sigma_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_model::{make_model, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mean_model() -> MomentModel {
        let spec: ModelSpec =
            toml::from_str("family = \"mean\"\ncolumns = { response = \"x\" }").unwrap();
        make_model(&spec).unwrap()
    }

    fn normal_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Dataset::from_columns(vec![("x", x)]).unwrap()
    }

    #[test]
    fn centered_column_gives_uniform_weights() {
        let xs = [0.3, -1.2, 2.5, 0.1, -0.4];
        let mean = xs.iter().sum::<f64>() / 5.0;
        let g = MomentMatrix::from_column(&xs.iter().map(|x| x - mean).collect::<Vec<_>>());
        let sol = solve_tilting(&g);
        assert!(sol.is_converged());
        assert!(sol.lambda_hat[0].abs() < 1e-10);
        assert!((sol.log_etel + 5.0 * 5f64.ln()).abs() < 1e-9);
        assert!(sol.weights.iter().all(|w| (w - 0.2).abs() < 1e-12));
    }

    /// Brute-force minimizer of (1/3)(e^{−λ} + 1 + e^{2λ}): grid then bisection
    /// on the derivative.
    #[test]
    fn three_point_dual_matches_grid() {
        let f = |l: f64| ((-l).exp() + 1.0 + (2.0 * l).exp()) / 3.0;
        let mut best = (-5.0, f(-5.0));
        let mut k = 0;
        while k <= 10_000_000 {
            let l = -5.0 + k as f64 * 1e-6;
            let v = f(l);
            if v < best.1 {
                best = (l, v);
            }
            k += 1;
        }
        let (mut lo, mut hi) = (best.0 - 1e-6, best.0 + 1e-6);
        let df = |l: f64| -(-l).exp() + 2.0 * (2.0 * l).exp();
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if df(mid) > 0.0 { hi = mid } else { lo = mid }
        }
        let oracle = 0.5 * (lo + hi);
        let sol = solve_tilting(&MomentMatrix::from_column(&[-1.0, 0.0, 2.0]));
        assert!(sol.is_converged());
        assert!((sol.lambda_hat[0] - oracle).abs() < 1e-6, "{} vs {oracle}", sol.lambda_hat[0]);
        // closed form: e^{3λ} = 1/2
        assert!((sol.lambda_hat[0] - (0.5f64).ln() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn origin_outside_hull() {
        let sol = solve_tilting(&MomentMatrix::from_column(&[1.0, 2.0, 3.0]));
        assert_eq!(sol.status, SolveStatus::HullFailure);
        assert_eq!(sol.log_etel, f64::NEG_INFINITY);
    }

    #[test]
    fn constraint_and_normalization_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                vec![e + 0.1, e * z, e.powi(3) - 0.2]
            })
            .collect();
        let sol = solve_tilting(&MomentMatrix::from_rows(&rows).unwrap());
        assert!(sol.is_converged());
        let g = MomentMatrix::from_rows(&rows).unwrap();
        for j in 0..3 {
            let s: f64 = sol.weights.iter().zip(g.column(j)).map(|(w, x)| w * x).sum();
            assert!(s.abs() <= 1e-8);
        }
        assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(sol.log_etel < -200.0 * 200f64.ln());
    }

    #[test]
    fn mean_model_profile_bound() {
        let m = mean_model();
        let data = normal_data(40, 5);
        let xbar = data.column("x").unwrap().iter().sum::<f64>() / 40.0;
        let bound = -40.0 * 40f64.ln();
        let (at_mean, _) = log_etel(&m, &ParameterPoint::new(vec![xbar], vec![]), &data).unwrap();
        assert!((at_mean - bound).abs() < 1e-9);
        let (shifted, _) =
            log_etel(&m, &ParameterPoint::new(vec![xbar + 0.1], vec![]), &data).unwrap();
        assert!(shifted < at_mean);
        let far = ParameterPoint::new(vec![100.0], vec![]);
        assert_eq!(log_etel(&m, &far, &data).unwrap().0, f64::NEG_INFINITY);
    }

    #[test]
    fn estimate_of_mean_model_is_sample_mean() {
        let m = mean_model();
        let data = normal_data(300, 8);
        let xbar = data.column("x").unwrap().iter().sum::<f64>() / 300.0;
        let est = etel_estimate(&m, &data, &ParameterPoint::new(vec![0.5], vec![])).unwrap();
        assert!((est.theta[0] - xbar).abs() < 1e-6, "{} vs {xbar}", est.theta[0]);
    }

    #[test]
    fn estimate_fails_without_feasible_start() {
        // E(x − θ) = 0 and E(x − θ)² = 1 cannot both hold on data of spread 0.1.
        let spec: ModelSpec = toml::from_str(
            "family = \"location\"\ncolumns = { response = \"x\" }\nmoments = [{ kind = \"residual\" }, { kind = \"residual_power\", power = 2, offset = 1.0 }]",
        )
        .unwrap();
        let m = make_model(&spec).unwrap();
        let data = Dataset::from_columns(vec![("x", vec![0.0, 0.1, 0.05, 0.02])]).unwrap();
        assert!(etel_estimate(&m, &data, &ParameterPoint::new(vec![3.0], vec![])).is_err());
    }

    #[test]
    fn sandwich_of_mean_model() {
        let m = mean_model();
        let data = normal_data(500, 2);
        let x = data.column("x").unwrap();
        let s = plugin_sandwich(&m, &ParameterPoint::new(vec![0.0], vec![]), &data).unwrap();
        let second = x.iter().map(|v| v * v).sum::<f64>() / 500.0;
        assert!((s.gamma_hat[(0, 0)] + 1.0).abs() < 1e-8);
        assert!((s.delta_hat[(0, 0)] - second).abs() < 1e-12);
        assert!((s.sigma_hat[(0, 0)] - second).abs() < 1e-8);
    }

    #[test]
    fn duplicated_coordinate_makes_delta_singular() {
        use crate::moment_model::{Link, MomentFunction, Primitive, RegressionMoments};
        use std::sync::Arc;
        let reg = RegressionMoments::new(
            "location",
            Link::Identity,
            "x",
            true,
            vec![],
            vec![
                Primitive::Residual,
                Primitive::ResidualPower { power: 1, offset: 0.0 },
            ],
        )
        .unwrap();
        assert_eq!(reg.coordinates().len(), 2);
        let m = MomentModel::new("dup", Arc::new(reg), vec![true, true], vec![false]).unwrap();
        let data = normal_data(100, 4);
        let err = plugin_sandwich(&m, &ParameterPoint::new(vec![0.0], vec![]), &data);
        assert!(matches!(err, Err(BetelError::SingularDelta)));
    }
}
