//! Pseudo-true values under misspecification: the population tilting dual
//! λ∘(ψ), the criterion E log(dQ*/dP) and its maximizer ψ∘, all by streaming
//! Monte Carlo over a large simulated population.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_float, Dataset};
use crate::dgp::{generate, DgpSpec};
use crate::error::{BetelError, Result};
use crate::moment_model::MomentModel;
use crate::optim::{golden_section, nelder_mead};
use crate::seed::derive_seed;

pub const DEFAULT_SHARD_SIZE: usize = 250_000;
const HALF_SAMPLE_REPLICATES: usize = 10;

/// A simulated population of `size` draws from a DGP, produced shard by shard
/// from per-shard seeds so that it never has to be held in memory.
#[derive(Debug, Clone)]
pub struct Population {
    dgp: DgpSpec,
    size: usize,
    shard_size: usize,
    seed: u64,
}

impl Population {
    pub fn new(dgp: DgpSpec, size: usize, seed: u64) -> Result<Self> {
        Self::with_shard_size(dgp, size, seed, DEFAULT_SHARD_SIZE)
    }

    pub fn with_shard_size(dgp: DgpSpec, size: usize, seed: u64, shard_size: usize) -> Result<Self> {
        if size == 0 || shard_size == 0 {
            return Err(BetelError::InvalidDgp("population and shard sizes must be positive".into()));
        }
        dgp.with(1, 0).validate()?;
        Ok(Self { dgp, size, shard_size, seed })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The first `size` draws of this population (whole shards).
    pub fn leading(&self, size: usize) -> Self {
        let shards = size.div_ceil(self.shard_size).max(1);
        Self { size: (shards * self.shard_size).min(self.size), ..self.clone() }
    }

    fn shard_count(&self) -> usize {
        self.size.div_ceil(self.shard_size)
    }

    fn shard(&self, k: usize) -> Result<Dataset> {
        let len = self.shard_size.min(self.size - k * self.shard_size);
        generate(&self.dgp.with(len, derive_seed(self.seed, k as u64)))
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Sufficient sums of one shard at a fixed (ψ, λ); exponentials are taken
/// relative to the shard maximum `shift` of λ'g.
#[derive(Debug, Clone)]
struct ShardStats {
    n: f64,
    sum_g: Vec<f64>,
    shift: f64,
    sum_w: f64,
    sum_wg: Vec<f64>,
    sum_wgg: DMatrix<f64>,
    max_abs: f64,
}

fn shard_stats(model: &MomentModel, psi: &[f64], data: &Dataset, lambda: &[f64]) -> Result<ShardStats> {
    let g = model.eval_moments_flat(psi, data)?;
    let (n, d) = (g.n_rows(), g.n_cols());
    let a: Vec<f64> = (0..n).map(|i| g.row(i).iter().zip(lambda).map(|(x, l)| x * l).sum()).collect();
    let shift = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum_g = vec![CompensatedSum::default(); d];
    let mut sum_w = CompensatedSum::default();
    let mut sum_wg = vec![CompensatedSum::default(); d];
    let mut sum_wgg = DMatrix::zeros(d, d);
    let mut max_abs = 0.0_f64;
    for (i, ai) in a.iter().enumerate() {
        let row = g.row(i);
        let w = (ai - shift).exp();
        sum_w.add(w);
        for r in 0..d {
            sum_g[r].add(row[r]);
            sum_wg[r].add(w * row[r]);
            max_abs = max_abs.max(row[r].abs());
            for c in 0..=r {
                sum_wgg[(r, c)] += w * row[r] * row[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            sum_wgg[(c, r)] = sum_wgg[(r, c)];
        }
    }
    Ok(ShardStats {
        n: n as f64,
        sum_g: sum_g.iter().map(CompensatedSum::value).collect(),
        shift,
        sum_w: sum_w.value(),
        sum_wg: sum_wg.iter().map(CompensatedSum::value).collect(),
        sum_wgg,
        max_abs,
    })
}

/// Population quantities at one λ, pooled over a set of shards.
#[derive(Debug, Clone)]
struct Pooled {
    /// log E exp(λ'g)
    log_f: f64,
    mean_g: Vec<f64>,
    /// E_w g, the gradient of log f
    tilted_mean: Vec<f64>,
    /// Cov_w g, the Hessian of log f
    tilted_cov: DMatrix<f64>,
    max_abs: f64,
}

fn pool<'a, I: Iterator<Item = &'a ShardStats> + Clone>(shards: I) -> Pooled {
    let first = shards.clone().next().expect("at least one shard");
    let d = first.sum_g.len();
    let shift = shards.clone().map(|s| s.shift).fold(f64::NEG_INFINITY, f64::max);
    let mut n = CompensatedSum::default();
    let mut sum_g = vec![CompensatedSum::default(); d];
    let mut sum_w = CompensatedSum::default();
    let mut sum_wg = vec![CompensatedSum::default(); d];
    let mut sum_wgg = DMatrix::zeros(d, d);
    let mut max_abs = 0.0_f64;
    for s in shards {
        let r = (s.shift - shift).exp();
        n.add(s.n);
        sum_w.add(r * s.sum_w);
        for j in 0..d {
            sum_g[j].add(s.sum_g[j]);
            sum_wg[j].add(r * s.sum_wg[j]);
        }
        sum_wgg += r * &s.sum_wgg;
        max_abs = max_abs.max(s.max_abs);
    }
    let n = n.value();
    let sw = sum_w.value();
    let tilted_mean: Vec<f64> = sum_wg.iter().map(|x| x.value() / sw).collect();
    let m = DVector::from_column_slice(&tilted_mean);
    let tilted_cov = sum_wgg / sw - &m * m.transpose();
    Pooled {
        log_f: shift + (sw / n).ln(),
        mean_g: sum_g.iter().map(|x| x.value() / n).collect(),
        tilted_mean,
        tilted_cov,
        max_abs,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solution of the population dual at one ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDual {
    pub lambda_circ: Vec<f64>,
    /// λ∘'E g − log E exp(λ∘'g) = E log(dQ*/dP).
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Standard error of `objective` from half-sample replicates.
    pub mc_se: f64,
}

/// One pass over the population at (ψ, λ), keeping per-shard sums.
fn population_pass(model: &MomentModel, psi: &[f64], pop: &Population, lambda: &[f64]) -> Result<Vec<ShardStats>> {
    (0..pop.shard_count())
        .into_par_iter()
        .map(|k| shard_stats(model, psi, &pop.shard(k)?, lambda))
        .collect()
}

fn objective_of(p: &Pooled, lambda: &[f64]) -> f64 {
    dot(lambda, &p.mean_g) - p.log_f
}

/// Spread of the criterion over random halves of the shards, scaled to the
/// full population; λ is held at the full-population solution.
fn half_sample_se(shards: &[ShardStats], lambda: &[f64], seed: u64) -> f64 {
    let k = shards.len();
    if k < 2 {
        return f64::NAN;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..k).collect();
    let values: Vec<f64> = (0..HALF_SAMPLE_REPLICATES)
        .map(|_| {
            idx.shuffle(&mut rng);
            objective_of(&pool(idx[..k / 2].iter().map(|&i| &shards[i])), lambda)
        })
        .collect();
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (var / 2.0).sqrt()
}

/// Minimizes log E exp(λ'g(X, ψ)) over λ by Newton's method from `start`.
pub fn population_dual_from(
    model: &MomentModel,
    psi: &[f64],
    pop: &Population,
    start: &[f64],
) -> Result<PopulationDual> {
    let mut lambda = start.to_vec();
    let mut shards = population_pass(model, psi, pop, &lambda)?;
    let mut state = pool(shards.iter());
    let mut iterations = 0;
    loop {
        let gn = inf_norm(&state.tilted_mean);
        if gn <= 1e-10 {
            break;
        }
        if lambda.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e4 || state.log_f < 1e-12f64.ln() || iterations >= 100 {
            return Err(BetelError::PopulationHullFailure);
        }
        iterations += 1;
        let rhs = DVector::from_column_slice(&state.tilted_mean);
        let dir: Vec<f64> = match state.tilted_cov.clone().cholesky() {
            Some(ch) => ch.solve(&rhs).iter().map(|x| -x).collect(),
            None => state.tilted_mean.iter().map(|x| -x).collect(),
        };
        let slope = dot(&dir, &state.tilted_mean);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let trial: Vec<f64> = lambda.iter().zip(&dir).map(|(l, s)| l + t * s).collect();
            let sh = population_pass(model, psi, pop, &trial)?;
            let st = pool(sh.iter());
            let near = -slope <= 1e-12 * (1.0 + state.log_f.abs());
            if st.log_f.is_finite()
                && (st.log_f <= state.log_f + 1e-4 * t * slope || (near && inf_norm(&st.tilted_mean) < gn))
            {
                next = Some((trial, sh, st));
                break;
            }
            t *= 0.5;
        }
        match next {
            Some((l, sh, st)) => {
                lambda = l;
                shards = sh;
                state = st;
            }
            None if gn <= 1e-8 * state.max_abs.max(1.0) => break,
            None => return Err(BetelError::PopulationHullFailure),
        }
    }
    Ok(PopulationDual {
        objective: objective_of(&state, &lambda),
        gradient_norm: inf_norm(&state.tilted_mean),
        iterations,
        mc_se: half_sample_se(&shards, &lambda, pop.seed ^ 0x68616c66),
        lambda_circ: lambda,
    })
}

/// Population dual at ψ started from λ = 0.
pub fn population_dual(model: &MomentModel, psi: &[f64], pop: &Population) -> Result<PopulationDual> {
    population_dual_from(model, psi, pop, &vec![0.0; model.d()])
}

/// Warm-started dual that falls back to λ = 0 when the warm start fails.
fn dual_warm(model: &MomentModel, psi: &[f64], pop: &Population, warm: &[f64]) -> Result<PopulationDual> {
    match population_dual_from(model, psi, pop, warm) {
        Ok(r) => Ok(r),
        Err(_) if warm.iter().any(|x| *x != 0.0) => population_dual(model, psi, pop),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub psi: f64,
    pub objective: f64,
    pub mc_se: f64,
}

/// How ψ∘ is searched for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum PseudoTrueSearch {
    /// One-parameter models: grid over [lower, upper], then golden section
    /// around the best grid point.
    Grid { lower: f64, upper: f64, step: f64 },
    /// Nelder-Mead over ψ on the leading `search_size` draws, then one dual
    /// solve on the full population at the optimum found.
    NelderMead { start: Option<Vec<f64>>, search_size: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTrueEstimate {
    pub model: String,
    pub parameter_labels: Vec<String>,
    pub psi_circ: Vec<f64>,
    pub lambda_circ: Vec<f64>,
    pub population_objective: f64,
    pub kl_divergence: f64,
    pub mc_sample_size: usize,
    pub mc_se: f64,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

impl PseudoTrueEstimate {
    /// Writes the grid curve as `psi,objective,mc_se`.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["psi", "objective", "mc_se"])?;
        for p in &self.curve {
            wtr.write_record([format_float(p.psi), format_float(p.objective), format_float(p.mc_se)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn finish(model: &MomentModel, psi: Vec<f64>, dual: PopulationDual, pop: &Population, curve: Vec<CurvePoint>) -> PseudoTrueEstimate {
    PseudoTrueEstimate {
        model: model.name().to_string(),
        parameter_labels: model.parameter_labels(),
        psi_circ: psi,
        lambda_circ: dual.lambda_circ,
        population_objective: dual.objective,
        kl_divergence: -dual.objective,
        mc_sample_size: pop.size(),
        mc_se: dual.mc_se,
        curve,
    }
}

/// Maximizes ψ ↦ E log(dQ*(ψ)/dP) over the model's free parameters.
pub fn estimate_pseudo_true(
    model: &MomentModel,
    pop: &Population,
    search: &PseudoTrueSearch,
) -> Result<PseudoTrueEstimate> {
    match search {
        PseudoTrueSearch::Grid { lower, upper, step } => {
            if model.dim() != 1 {
                return Err(BetelError::Config("grid search needs a one-parameter model".into()));
            }
            if !(step > &0.0) || !(upper > lower) {
                return Err(BetelError::Config("grid needs lower < upper and step > 0".into()));
            }
            let count = ((upper - lower) / step).round() as usize + 1;
            let mut warm = vec![0.0; model.d()];
            let mut curve = Vec::with_capacity(count);
            for k in 0..count {
                let psi = lower + k as f64 * step;
                match dual_warm(model, &[psi], pop, &warm) {
                    Ok(r) => {
                        curve.push(CurvePoint { psi, objective: r.objective, mc_se: r.mc_se });
                        warm = r.lambda_circ;
                    }
                    Err(BetelError::PopulationHullFailure) => {
                        curve.push(CurvePoint { psi, objective: f64::NEG_INFINITY, mc_se: f64::NAN })
                    }
                    Err(e) => return Err(e),
                }
            }
            let best = curve
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
                .map(|(k, _)| k)
                .filter(|k| curve[*k].objective.is_finite())
                .ok_or(BetelError::PopulationHullFailure)?;
            let a = curve[best.saturating_sub(1)].psi;
            let b = curve[(best + 1).min(count - 1)].psi;
            let (psi, _) = golden_section(
                |x| match dual_warm(model, &[x], pop, &warm) {
                    Ok(r) => -r.objective,
                    Err(_) => f64::INFINITY,
                },
                a,
                b,
                1e-6,
            );
            let dual = dual_warm(model, &[psi], pop, &warm)?;
            Ok(finish(model, vec![psi], dual, pop, curve))
        }
        PseudoTrueSearch::NelderMead { start, search_size } => {
            let sub = pop.leading(search_size.unwrap_or(500_000).min(pop.size()));
            let x0 = match start {
                Some(s) if s.len() == model.dim() => s.clone(),
                Some(s) => {
                    return Err(BetelError::DimensionMismatch { expected: model.dim(), got: s.len() })
                }
                None => model.initial_point(&sub.shard(0)?)?.to_vec(),
            };
            let mut warm = vec![0.0; model.d()];
            let mut objective = |x: &[f64]| match dual_warm(model, x, &sub, &warm) {
                Ok(r) => {
                    warm = r.lambda_circ;
                    -r.objective
                }
                Err(_) => f64::INFINITY,
            };
            let steps: Vec<f64> = x0.iter().map(|v| 0.1 * v.abs().max(1.0)).collect();
            let mut best = nelder_mead(&mut objective, &x0, &steps, 1500, 1e-12);
            // Restart once from the optimum to escape a collapsed simplex.
            let small: Vec<f64> = steps.iter().map(|s| 0.1 * s).collect();
            let again = nelder_mead(&mut objective, &best.x, &small, 800, 1e-14);
            if again.value <= best.value {
                best = again;
            }
            if !best.value.is_finite() {
                return Err(BetelError::PopulationHullFailure);
            }
            let dual = population_dual(model, &best.x, pop)?;
            Ok(finish(model, best.x, dual, pop, vec![]))
        }
    }
}
