//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use betel_core::moment_model::MomentMatrix;

/// Mean of exp(λ'g_i), the convex dual objective.
pub fn dual_objective(g: &MomentMatrix, lambda: &[f64]) -> f64 {
    let n = g.n_rows();
    (0..n)
        .map(|i| g.row(i).iter().zip(lambda).map(|(x, l)| x * l).sum::<f64>().exp())
        .sum::<f64>()
        / n as f64
}

/// Minimizer of the dual by a dense grid over [-half_width, half_width]^d
/// followed by repeated zooming grids around the incumbent. Handles d ≤ 2.
pub fn grid_tilting_oracle(g: &MomentMatrix, half_width: f64) -> Vec<f64> {
    let d = g.n_cols();
    assert!(d == 1 || d == 2, "grid oracle handles one or two moments");
    let points = if d == 1 { 20_001 } else { 401 };
    let mut step = 2.0 * half_width / (points - 1) as f64;
    let mut best = vec![0.0; d];
    let mut best_val = dual_objective(g, &best);
    let scan = |centre: &[f64], step: f64, k: i64, best: &mut Vec<f64>, best_val: &mut f64| {
        let offsets: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
        if d == 1 {
            for o in &offsets {
                let l = [centre[0] + o];
                let v = dual_objective(g, &l);
                if v < *best_val {
                    *best_val = v;
                    *best = l.to_vec();
                }
            }
        } else {
            for o1 in &offsets {
                for o2 in &offsets {
                    let l = [centre[0] + o1, centre[1] + o2];
                    let v = dual_objective(g, &l);
                    if v < *best_val {
                        *best_val = v;
                        *best = l.to_vec();
                    }
                }
            }
        }
    };
    let half = ((points - 1) / 2) as i64;
    scan(&vec![0.0; d], step, half, &mut best, &mut best_val);
    while step > 1e-11 {
        let centre = best.clone();
        step /= 10.0;
        // ±2 old steps around the incumbent
        scan(&centre, step, 20, &mut best, &mut best_val);
    }
    best
}

/// Log of ∫ exp(f(ψ)) dψ for scalar ψ by composite Simpson on `nodes`
/// intervals over [lo, hi].
pub fn log_integral_simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, nodes: usize) -> f64 {
    let m = if nodes % 2 == 0 { nodes } else { nodes + 1 };
    let h = (hi - lo) / m as f64;
    let vals: Vec<f64> = (0..=m).map(|i| f(lo + i as f64 * h)).collect();
    let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * (v - top).exp();
    }
    top + (s * h / 3.0).ln()
}
