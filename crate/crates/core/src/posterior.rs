//! BETEL posterior: tailored multivariate-t proposal, one-block independence
//! Metropolis-Hastings, and chain summaries.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{format_float, Dataset};
use crate::error::{BetelError, Result};
use crate::etel::{log_etel_value, SandwichEstimates};
use crate::moment_model::{MomentModel, PriorSpec};
use crate::optim::{bfgs, fd_gradient, fd_hessian, BfgsOptions};

/// Prior, ETEL likelihood and their sum for one model and dataset.
#[derive(Debug, Clone, Copy)]
pub struct BetelPosterior<'a> {
    pub model: &'a MomentModel,
    pub prior: &'a PriorSpec,
    pub data: &'a Dataset,
}

impl<'a> BetelPosterior<'a> {
    pub fn new(model: &'a MomentModel, prior: &'a PriorSpec, data: &'a Dataset) -> Result<Self> {
        if prior.dim() != model.dim() {
            return Err(BetelError::DimensionMismatch { expected: model.dim(), got: prior.dim() });
        }
        Ok(Self { model, prior, data })
    }

    pub fn log_prior(&self, psi: &[f64]) -> f64 {
        self.prior.log_density(psi)
    }

    pub fn log_lik(&self, psi: &[f64]) -> f64 {
        log_etel_value(self.model, psi, self.data)
    }

    pub fn log_post(&self, psi: &[f64]) -> f64 {
        let lp = self.log_prior(psi);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp + self.log_lik(psi)
    }
}

/// Multivariate Student-t q(ψ) = t_ν(location, dispersion).
#[derive(Debug, Clone)]
pub struct TailoredProposal {
    location: Vec<f64>,
    dispersion: DMatrix<f64>,
    chol: DMatrix<f64>,
    df: f64,
    log_norm: f64,
}

impl TailoredProposal {
    pub fn new(location: Vec<f64>, dispersion: DMatrix<f64>, df: f64) -> Result<Self> {
        let k = location.len();
        if dispersion.nrows() != k || dispersion.ncols() != k {
            return Err(BetelError::DimensionMismatch { expected: k, got: dispersion.nrows() });
        }
        if !(df > 0.0) {
            return Err(BetelError::Config("proposal degrees of freedom must be positive".into()));
        }
        let sym = 0.5 * (&dispersion + dispersion.transpose());
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| BetelError::ModeSearchFailed("dispersion is not positive definite".into()))?
            .l();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let kf = k as f64;
        let log_norm = ln_gamma(0.5 * (df + kf))
            - ln_gamma(0.5 * df)
            - 0.5 * kf * (df * std::f64::consts::PI).ln()
            - 0.5 * log_det;
        Ok(Self { location, dispersion: sym, chol, df, log_norm })
    }

    pub fn location(&self) -> &[f64] {
        &self.location
    }

    pub fn dispersion(&self) -> &DMatrix<f64> {
        &self.dispersion
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(&self.location).map(|(a, b)| a - b));
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        let delta = y.norm_squared();
        self.log_norm - 0.5 * (self.df + self.dim() as f64) * (delta / self.df).ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.dim();
        let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
        let w: f64 = ChiSquared::new(self.df).expect("df > 0").sample(rng);
        let shift = &self.chol * z * (self.df / w).sqrt();
        self.location.iter().zip(shift.iter()).map(|(m, s)| m + s).collect()
    }
}

/// Mode of an objective and the inverse of its negative Hessian there.
#[derive(Debug, Clone)]
pub struct ModeCurvature {
    pub mode: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    /// (−H)⁻¹ with eigenvalues floored at `DISPERSION_FLOOR`.
    pub inverse_neg_hessian: DMatrix<f64>,
}

pub const DISPERSION_FLOOR: f64 = 1e-8;
const MODE_GRAD_TOL: f64 = 1e-5;
const HESSIAN_REL_STEP: f64 = 1e-4;
const GRADIENT_REL_STEP: f64 = 1e-5;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Local search from one start: BFGS on −objective, then Newton polishing
/// with the finite-difference Hessian. Returns the point, its value, gradient
/// norm and whether the stationarity check passed.
fn climb<F: Fn(&[f64]) -> f64>(objective: &F, start: &[f64]) -> Option<(Vec<f64>, f64, f64, bool)> {
    let neg = |x: &[f64]| {
        let v = objective(x);
        if v.is_finite() { -v } else { f64::INFINITY }
    };
    if !neg(start).is_finite() {
        return None;
    }
    let opts = BfgsOptions { max_iter: 300, grad_tol: 1e-7, fd_rel_step: GRADIENT_REL_STEP };
    let r = bfgs(&neg, start, &opts);
    let mut x = r.x;
    let mut fx = r.value;
    let mut ok = false;
    let mut gn = f64::INFINITY;
    for _ in 0..8 {
        let g = fd_gradient(&neg, &x, GRADIENT_REL_STEP);
        gn = inf_norm(&g);
        if !gn.is_finite() {
            break;
        }
        let h = fd_hessian(&neg, &x, HESSIAN_REL_STEP);
        let Some(ch) = (0.5 * (&h + h.transpose())).cholesky() else { break };
        let step = ch.solve(&DVector::from_column_slice(&g));
        let decrement: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
        if gn <= MODE_GRAD_TOL || decrement <= 1e-8 {
            ok = true;
            break;
        }
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        let ft = neg(&trial);
        if ft <= fx {
            x = trial;
            fx = ft;
        } else {
            break;
        }
    }
    Some((x, -fx, gn, ok))
}

/// Maximizes `objective` from `start`; when that fails, retries from up to
/// five points produced by `restart` (typically prior draws).
pub fn find_mode_and_curvature<F, R>(
    objective: &F,
    start: &[f64],
    mut restart: R,
) -> Result<ModeCurvature>
where
    F: Fn(&[f64]) -> f64,
    R: FnMut() -> Vec<f64>,
{
    let mut found = climb(objective, start).filter(|c| c.3);
    let mut attempts = 0;
    while found.is_none() && attempts < 5 {
        attempts += 1;
        let candidate = (0..50).map(|_| restart()).find(|c| objective(c).is_finite());
        if let Some(c) = candidate {
            found = climb(objective, &c).filter(|c| c.3);
        }
    }
    let (mode, value, gradient_norm, _) = found.ok_or_else(|| {
        BetelError::ModeSearchFailed("no stationary maximum from any start".into())
    })?;
    let h = fd_hessian(objective, &mode, HESSIAN_REL_STEP);
    let neg_h = -0.5 * (&h + h.transpose());
    let eig = SymmetricEigen::new(neg_h);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(BetelError::ModeSearchFailed(
            "Hessian at the mode is not negative definite".into(),
        ));
    }
    let inv_eig = eig.eigenvalues.map(|l| (1.0 / l).max(DISPERSION_FLOOR));
    let q = &eig.eigenvectors;
    let inverse_neg_hessian = q * DMatrix::from_diagonal(&inv_eig) * q.transpose();
    Ok(ModeCurvature { mode, value, gradient_norm, inverse_neg_hessian })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TailorOn {
    #[default]
    Posterior,
    Etel,
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub draws: usize,
    pub burn_in: usize,
    pub df: f64,
    pub scale: f64,
    pub tailor_on: TailorOn,
    /// Proposal draws for the ordinate denominator; defaults to `draws`.
    pub ordinate_draws: Option<usize>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            burn_in: 1_000,
            df: 15.0,
            scale: 1.2,
            tailor_on: TailorOn::Posterior,
            ordinate_draws: None,
        }
    }
}

/// Builds the tailored proposal for a posterior.
pub fn tailor_proposal(
    post: &BetelPosterior,
    config: &McmcConfig,
    seed: u64,
) -> Result<(TailoredProposal, ModeCurvature)> {
    let start = post.model.initial_point(post.data)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465_7365_6564);
    let restart = || post.prior.sample(&mut rng);
    let mc = match config.tailor_on {
        TailorOn::Posterior => find_mode_and_curvature(&|x: &[f64]| post.log_post(x), &start, restart)?,
        TailorOn::Etel => find_mode_and_curvature(&|x: &[f64]| post.log_lik(x), &start, restart)?,
    };
    let proposal =
        TailoredProposal::new(mc.mode.clone(), config.scale * &mc.inverse_neg_hessian, config.df)?;
    Ok((proposal, mc))
}

/// Tailors the proposal and runs the sampler for one posterior.
pub fn sample_posterior(
    post: &BetelPosterior,
    config: &McmcConfig,
    seed: u64,
) -> Result<(PosteriorChain, TailoredProposal)> {
    let (proposal, _) = tailor_proposal(post, config, seed)?;
    let log_post = |x: &[f64]| post.log_post(x);
    let chain = run_mh(&log_post, &proposal, config.draws, config.burn_in, seed, post.model.parameter_labels())?;
    Ok((chain, proposal))
}

/// Stored MCMC output after burn-in.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub labels: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub log_posts: Vec<f64>,
    pub accepted: Vec<bool>,
    pub burn_in: usize,
    pub seed: u64,
}

/// Sidecar metadata written next to a chain CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub draws: usize,
    pub burn_in: usize,
    pub acceptance_rate: f64,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(self.labels.len(), Vec::len)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| mean(&self.column(j))).collect()
    }

    /// Draws with named columns, then `log_post` and `accepted` (0/1).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = self.labels.clone();
        header.push("log_post".into());
        header.push("accepted".into());
        wtr.write_record(&header)?;
        for ((d, lp), acc) in self.draws.iter().zip(&self.log_posts).zip(&self.accepted) {
            let mut rec: Vec<String> = d.iter().map(|x| format_float(*x)).collect();
            rec.push(format_float(*lp));
            rec.push(if *acc { "1" } else { "0" }.into());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn metadata(&self, config_hash: &str) -> ChainMetadata {
        ChainMetadata {
            seed: self.seed,
            config_hash: config_hash.to_string(),
            draws: self.len(),
            burn_in: self.burn_in,
            acceptance_rate: self.acceptance_rate(),
        }
    }
}

/// Independence-chain Metropolis-Hastings started at the proposal location.
///
/// Every iteration consumes one proposal draw and one uniform, so the stream
/// of random numbers, and hence the chain, is fixed by `seed`.
pub fn run_mh<F: Fn(&[f64]) -> f64>(
    log_post: &F,
    proposal: &TailoredProposal,
    draws: usize,
    burn_in: usize,
    seed: u64,
    labels: Vec<String>,
) -> Result<PosteriorChain> {
    let mut current = proposal.location().to_vec();
    let mut lp = log_post(&current);
    if !lp.is_finite() {
        return Err(BetelError::InfeasibleStart);
    }
    let mut lq = proposal.log_density(&current);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = PosteriorChain {
        labels,
        draws: Vec::with_capacity(draws),
        log_posts: Vec::with_capacity(draws),
        accepted: Vec::with_capacity(draws),
        burn_in,
        seed,
    };
    for s in 0..burn_in + draws {
        let cand = proposal.sample(&mut rng);
        let u: f64 = rng.random();
        let lp_c = log_post(&cand);
        let mut moved = false;
        if lp_c.is_finite() {
            let lq_c = proposal.log_density(&cand);
            let log_alpha = ((lp_c - lp) + (lq - lq_c)).min(0.0);
            if u.ln() < log_alpha {
                current = cand;
                lp = lp_c;
                lq = lq_c;
                moved = true;
            }
        }
        if s >= burn_in {
            chain.draws.push(current.clone());
            chain.log_posts.push(lp);
            chain.accepted.push(moved);
        }
    }
    Ok(chain)
}

/// Posterior summary of one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub ineff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub acceptance_rate: f64,
}

impl SummaryTable {
    pub fn row(&self, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["parameter", "mean", "sd", "median", "lower", "upper", "ineff"])?;
        for r in &self.rows {
            wtr.write_record([
                r.parameter.clone(),
                format_float(r.mean),
                format_float(r.sd),
                format_float(r.median),
                format_float(r.lower),
                format_float(r.upper),
                format_float(r.ineff),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor S − 1).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn parzen(u: f64) -> f64 {
    if u <= 0.5 {
        1.0 - 6.0 * u * u + 6.0 * u * u * u
    } else if u <= 1.0 {
        2.0 * (1.0 - u).powi(3)
    } else {
        0.0
    }
}

/// 1 + 2 Σ_{k=1}^{K} w(k/K) ρ̂_k with the Parzen window and K = ⌊S^{1/3}⌋.
pub fn inefficiency(xs: &[f64]) -> f64 {
    let s = xs.len();
    if s < 2 {
        return 1.0;
    }
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s as f64;
    if !(c0 > 0.0) {
        return 1.0;
    }
    let k_max = (s as f64).cbrt().floor() as usize;
    let mut total = 1.0;
    for k in 1..=k_max.min(s - 1) {
        let ck = (0..s - k).map(|t| (xs[t] - m) * (xs[t + k] - m)).sum::<f64>() / s as f64;
        total += 2.0 * parzen(k as f64 / k_max as f64) * ck / c0;
    }
    total.max(0.0)
}

pub fn summarize(chain: &PosteriorChain) -> SummaryTable {
    let rows = (0..chain.dim())
        .map(|j| {
            let col = chain.column(j);
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            SummaryRow {
                parameter: chain.labels.get(j).cloned().unwrap_or_else(|| format!("psi{j}")),
                mean: mean(&col),
                sd: std_dev(&col),
                median: quantile(&sorted, 0.5),
                lower: quantile(&sorted, 0.025),
                upper: quantile(&sorted, 0.975),
                ineff: inefficiency(&col),
            }
        })
        .collect();
    SummaryTable { rows, acceptance_rate: chain.acceptance_rate() }
}

/// Posterior sd over the plug-in asymptotic sd √(Σ̂_kk / n), per coordinate.
/// A chain with no spread yields 0.
pub fn bvm_diagnostic(chain: &PosteriorChain, sandwich: &SandwichEstimates, n: usize) -> Vec<f64> {
    (0..chain.dim())
        .map(|j| {
            let sd = std_dev(&chain.column(j));
            let asym = (sandwich.sigma_hat[(j, j)] / n as f64).sqrt();
            if sd == 0.0 { 0.0 } else { sd / asym }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iid_normal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn proposal_density_matches_univariate_t() {
        let q = TailoredProposal::new(vec![1.0], DMatrix::from_element(1, 1, 4.0), 5.0).unwrap();
        let t = crate::moment_model::StudentTPrior::new(1.0, 2.0, 5.0).unwrap();
        for x in [-3.0, 0.0, 1.0, 2.5] {
            assert!((q.log_density(&[x]) - t.log_density(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_mode_and_curvature() {
        let a = [0.5, -1.0];
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let f = |x: &[f64]| {
            let d = DVector::from_iterator(2, x.iter().zip(&a).map(|(x, a)| x - a));
            -0.5 * (d.transpose() * &h * &d)[(0, 0)]
        };
        let mc = find_mode_and_curvature(&f, &[3.0, 3.0], || vec![0.0, 0.0]).unwrap();
        assert!((mc.mode[0] - a[0]).abs() < 1e-6 && (mc.mode[1] - a[1]).abs() < 1e-6);
        let inv = h.try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((mc.inverse_neg_hessian[(i, j)] - inv[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unbounded_objective_has_no_mode() {
        let f = |x: &[f64]| -x[0] * x[0] + x[1] * x[1];
        let err = find_mode_and_curvature(&f, &[0.1, 0.1], || vec![0.2, -0.3]);
        assert!(matches!(err, Err(BetelError::ModeSearchFailed(_))));
    }

    #[test]
    fn target_equal_to_proposal_always_accepts() {
        let q = TailoredProposal::new(vec![0.0, 1.0], DMatrix::identity(2, 2), 7.0).unwrap();
        let chain = run_mh(&|x: &[f64]| q.log_density(x), &q, 2000, 100, 9, vec![]).unwrap();
        assert_eq!(chain.acceptance_rate(), 1.0);
    }

    #[test]
    fn chain_is_reproducible_and_rejections_repeat_rows() {
        let q = TailoredProposal::new(vec![0.0], DMatrix::from_element(1, 1, 2.0), 4.0).unwrap();
        let target = |x: &[f64]| if x[0] > 1.5 { f64::NEG_INFINITY } else { -0.5 * x[0] * x[0] };
        let a = run_mh(&target, &q, 3000, 50, 42, vec!["x".into()]).unwrap();
        let b = run_mh(&target, &q, 3000, 50, 42, vec!["x".into()]).unwrap();
        assert_eq!(a, b);
        assert!(a.log_posts.iter().all(|l| l.is_finite()));
        for s in 1..a.len() {
            if !a.accepted[s] {
                assert_eq!(a.draws[s], a.draws[s - 1]);
            }
        }
        let c = run_mh(&target, &q, 3000, 50, 43, vec!["x".into()]).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let q = TailoredProposal::new(vec![0.0], DMatrix::identity(1, 1), 4.0).unwrap();
        let err = run_mh(&|_: &[f64]| f64::NEG_INFINITY, &q, 10, 0, 1, vec![]);
        assert!(matches!(err, Err(BetelError::InfeasibleStart)));
    }

    #[test]
    fn iid_inefficiency_is_near_one() {
        let ineff = inefficiency(&iid_normal(10_000, 17));
        assert!((0.5..=2.0).contains(&ineff), "{ineff}");
    }

    #[test]
    fn correlated_stream_is_inefficient() {
        // AR(1) with ρ = 0.8: true factor (1+ρ)/(1−ρ) = 9
        let e = iid_normal(20_000, 3);
        let mut x = vec![0.0; e.len()];
        for t in 1..e.len() {
            x[t] = 0.8 * x[t - 1] + e[t];
        }
        let ineff = inefficiency(&x);
        assert!(ineff > 4.0, "{ineff}");
    }

    #[test]
    fn constant_chain_summary() {
        let chain = PosteriorChain {
            labels: vec!["a".into()],
            draws: vec![vec![2.0]; 50],
            log_posts: vec![0.0; 50],
            accepted: vec![false; 50],
            burn_in: 0,
            seed: 0,
        };
        let t = summarize(&chain);
        let r = &t.rows[0];
        assert_eq!((r.sd, r.lower, r.median, r.upper), (0.0, 2.0, 2.0, 2.0));
        assert_eq!(r.ineff, 1.0);
        let sandwich = SandwichEstimates {
            gamma_hat: DMatrix::identity(1, 1),
            delta_hat: DMatrix::identity(1, 1),
            sigma_hat: DMatrix::identity(1, 1),
        };
        assert_eq!(bvm_diagnostic(&chain, &sandwich, 100), vec![0.0]);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&sorted, 0.5), 2.5);
        assert!((quantile(&sorted, 0.025) - 1.075).abs() < 1e-12);
        assert_eq!(std_dev(&[1.0, 3.0]), 2f64.sqrt());
    }

    #[test]
    fn stationarity_smoke() {
        let q = TailoredProposal::new(vec![0.3], DMatrix::from_element(1, 1, 1.0), 10.0).unwrap();
        let chain = run_mh(&|x: &[f64]| q.log_density(x), &q, 20_000, 0, 5, vec![]).unwrap();
        let col = chain.column(0);
        let m = mean(&col);
        let sd = std_dev(&col);
        let true_sd = (10.0f64 / 8.0).sqrt();
        let se = true_sd / (col.len() as f64).sqrt();
        assert!((m - 0.3).abs() < 3.0 * se, "{m}");
        // sd of the sample sd of a t_10 stream is inflated by the kurtosis; 3%
        // is more than three standard errors at this length.
        assert!((sd - true_sd).abs() < 0.03 * true_sd, "{sd}");
    }

    #[test]
    fn chain_csv_layout() {
        let chain = PosteriorChain {
            labels: vec!["a".into(), "v[e^3]".into()],
            draws: vec![vec![1.0, 2.0], vec![1.0, 2.0]],
            log_posts: vec![-3.5, -3.5],
            accepted: vec![true, false],
            burn_in: 0,
            seed: 1,
        };
        let mut buf = Vec::new();
        chain.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "a,v[e^3],log_post,accepted\n1.0,2.0,-3.5,1\n1.0,2.0,-3.5,0\n");
    }
}
