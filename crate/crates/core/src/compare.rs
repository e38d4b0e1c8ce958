//! Marginal likelihoods by the Chib identity with the Chib-Jeliazkov
//! posterior ordinate, Bayes factors and model rankings.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_float, Dataset};
use crate::error::{BetelError, Result};
use crate::moment_model::{GrandModelBundle, MomentModel, PriorSpec};
use crate::posterior::{sample_posterior, BetelPosterior, McmcConfig, PosteriorChain, TailoredProposal};
use crate::seed::derive_seed;

const ORDINATE_BATCHES: usize = 10;

/// log m(x) = log π(ψ̃) + log p(x | ψ̃) − log π(ψ̃ | x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihoodEstimate {
    pub log_ml: f64,
    pub log_prior_at: f64,
    pub log_lik_at: f64,
    pub log_ordinate_at: f64,
    pub psi_tilde: Vec<f64>,
    pub parameter_labels: Vec<String>,
    /// Standard error of `log_ordinate_at`.
    pub mc_error: f64,
    pub acceptance_rate: f64,
    pub seed: u64,
}

impl MarginalLikelihoodEstimate {
    pub fn from_parts(log_prior_at: f64, log_lik_at: f64, log_ordinate_at: f64) -> Self {
        Self {
            log_ml: log_prior_at + log_lik_at - log_ordinate_at,
            log_prior_at,
            log_lik_at,
            log_ordinate_at,
            psi_tilde: vec![],
            parameter_labels: vec![],
            mc_error: 0.0,
            acceptance_rate: f64::NAN,
            seed: 0,
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log of the mean of exp(terms) and the squared delta-method standard error
/// of that log mean, from batch means.
fn log_mean_with_variance(terms: &[f64]) -> (f64, f64) {
    let n = terms.len();
    let log_mean = log_sum_exp(terms) - (n as f64).ln();
    if !log_mean.is_finite() {
        return (log_mean, f64::INFINITY);
    }
    let b = ORDINATE_BATCHES.min(n);
    let size = n / b;
    if size == 0 || b < 2 {
        return (log_mean, 0.0);
    }
    // Batch means relative to the overall mean.
    let rel: Vec<f64> = (0..b)
        .map(|k| {
            let chunk = &terms[k * size..(k + 1) * size];
            chunk.iter().map(|t| (t - log_mean).exp()).sum::<f64>() / size as f64
        })
        .collect();
    let m = rel.iter().sum::<f64>() / b as f64;
    let var = rel.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (log_mean, var / (b as f64 * m * m))
}

/// Chib-Jeliazkov ordinate log π(ψ̃ | x) for an independence M-H chain and its
/// batch-means standard error.
///
/// Numerator: mean over chain draws of α(ψ, ψ̃) q(ψ̃). Denominator: mean over
/// `j` fresh proposal draws of α(ψ̃, ψ).
pub fn posterior_ordinate<F: Fn(&[f64]) -> f64>(
    chain: &PosteriorChain,
    proposal: &TailoredProposal,
    psi_tilde: &[f64],
    log_post: &F,
    j: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let lp_t = log_post(psi_tilde);
    if !lp_t.is_finite() {
        return Err(BetelError::InfeasibleStart);
    }
    if chain.is_empty() || j == 0 {
        return Err(BetelError::DegenerateOrdinate);
    }
    let lq_t = proposal.log_density(psi_tilde);
    let numerator: Vec<f64> = chain
        .draws
        .iter()
        .zip(&chain.log_posts)
        .map(|(psi, lp)| {
            let lq = proposal.log_density(psi);
            ((lp_t - lp) + (lq - lq_t)).min(0.0) + lq_t
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let denominator: Vec<f64> = (0..j)
        .map(|_| {
            let cand = proposal.sample(&mut rng);
            let lp = log_post(&cand);
            if !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            ((lp - lp_t) + (lq_t - proposal.log_density(&cand))).min(0.0)
        })
        .collect();
    let (log_num, var_num) = log_mean_with_variance(&numerator);
    let (log_den, var_den) = log_mean_with_variance(&denominator);
    if !log_den.is_finite() || !log_num.is_finite() {
        return Err(BetelError::DegenerateOrdinate);
    }
    Ok((log_num - log_den, (var_num + var_den).sqrt()))
}

/// Chib estimate at `psi_tilde` from a chain and its proposal, with the prior
/// and likelihood supplied separately.
#[allow(clippy::too_many_arguments)]
pub fn chib_estimate<P, L>(
    log_prior: &P,
    log_lik: &L,
    chain: &PosteriorChain,
    proposal: &TailoredProposal,
    psi_tilde: &[f64],
    j: usize,
    seed: u64,
) -> Result<MarginalLikelihoodEstimate>
where
    P: Fn(&[f64]) -> f64,
    L: Fn(&[f64]) -> f64,
{
    let log_post = |x: &[f64]| {
        let lp = log_prior(x);
        if lp.is_finite() { lp + log_lik(x) } else { f64::NEG_INFINITY }
    };
    let (log_ordinate, mc_error) = posterior_ordinate(chain, proposal, psi_tilde, &log_post, j, seed)?;
    let mut est = MarginalLikelihoodEstimate::from_parts(log_prior(psi_tilde), log_lik(psi_tilde), log_ordinate);
    est.psi_tilde = psi_tilde.to_vec();
    est.parameter_labels = chain.labels.clone();
    est.mc_error = mc_error;
    est.acceptance_rate = chain.acceptance_rate();
    est.seed = seed;
    Ok(est)
}

/// Tailored proposal, chain and ordinate for one posterior, evaluated at the
/// posterior mean (the mode when the mean has zero posterior density).
pub fn log_marginal_likelihood(
    model: &MomentModel,
    prior: &PriorSpec,
    data: &Dataset,
    config: &McmcConfig,
    seed: u64,
) -> Result<MarginalLikelihoodEstimate> {
    Ok(fit_and_estimate(model, prior, data, config, seed)?.1)
}

/// As [`log_marginal_likelihood`], also returning the chain.
pub fn fit_and_estimate(
    model: &MomentModel,
    prior: &PriorSpec,
    data: &Dataset,
    config: &McmcConfig,
    seed: u64,
) -> Result<(PosteriorChain, MarginalLikelihoodEstimate)> {
    let post = BetelPosterior::new(model, prior, data)?;
    let (chain, proposal) = sample_posterior(&post, config, seed)?;
    let mut psi_tilde = chain.mean();
    if !post.log_post(&psi_tilde).is_finite() {
        psi_tilde = proposal.location().to_vec();
    }
    let j = config.ordinate_draws.unwrap_or(config.draws);
    let est = chib_estimate(
        &|x: &[f64]| post.log_prior(x),
        &|x: &[f64]| post.log_lik(x),
        &chain,
        &proposal,
        &psi_tilde,
        j,
        seed.wrapping_add(1),
    )?;
    Ok((chain, MarginalLikelihoodEstimate { seed, ..est }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub id: usize,
    pub name: String,
    pub estimate: Option<MarginalLikelihoodEstimate>,
    pub error: Option<String>,
}

/// Models in input order, the ranking of the successful ones and the matrix
/// of log Bayes factors log B_{jl} = log m_j − log m_l (None when either
/// model failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub models: Vec<RankedModel>,
    /// Ids of successful models, best first; ties go to the smaller id.
    pub order: Vec<usize>,
    pub log_bayes_factors: Vec<Vec<Option<f64>>>,
}

impl ModelRanking {
    pub fn from_results(results: Vec<(String, Result<MarginalLikelihoodEstimate>)>) -> Self {
        let models: Vec<RankedModel> = results
            .into_iter()
            .enumerate()
            .map(|(id, (name, r))| match r {
                Ok(e) => RankedModel { id, name, estimate: Some(e), error: None },
                Err(e) => RankedModel { id, name, estimate: None, error: Some(e.to_string()) },
            })
            .collect();
        let log_ml = |m: &RankedModel| m.estimate.as_ref().map(|e| e.log_ml).filter(|v| !v.is_nan());
        let mut order: Vec<usize> = models.iter().filter(|m| log_ml(m).is_some()).map(|m| m.id).collect();
        order.sort_by(|a, b| {
            log_ml(&models[*b]).unwrap().total_cmp(&log_ml(&models[*a]).unwrap()).then(a.cmp(b))
        });
        let log_bayes_factors = models
            .iter()
            .map(|mj| {
                models
                    .iter()
                    .map(|ml| Some(log_ml(mj)? - log_ml(ml)?))
                    .collect()
            })
            .collect();
        Self { models, order, log_bayes_factors }
    }

    pub fn winner(&self) -> Option<&RankedModel> {
        self.order.first().map(|id| &self.models[*id])
    }

    pub fn log_bayes_factor(&self, j: usize, l: usize) -> Option<f64> {
        self.log_bayes_factors.get(j)?.get(l).copied().flatten()
    }

    pub fn failures(&self) -> usize {
        self.models.iter().filter(|m| m.error.is_some()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per model in input order; rank is empty for failed models.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record([
            "model", "rank", "log_ml", "log_prior", "log_lik", "log_ordinate", "mc_error",
            "acceptance_rate", "status",
        ])?;
        for m in &self.models {
            let rank = self.order.iter().position(|id| *id == m.id).map(|r| (r + 1).to_string());
            let mut rec = vec![m.name.clone(), rank.unwrap_or_default()];
            match &m.estimate {
                Some(e) => {
                    rec.extend(
                        [e.log_ml, e.log_prior_at, e.log_lik_at, e.log_ordinate_at, e.mc_error, e.acceptance_rate]
                            .iter()
                            .map(|v| format_float(*v)),
                    );
                    rec.push("ok".into());
                }
                None => {
                    rec.extend(std::iter::repeat_n(String::new(), 6));
                    rec.push(format!("failed: {}", m.error.as_deref().unwrap_or("")));
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Estimates every reformulated model of `bundle` in parallel; model `k` uses
/// seed `derive_seed(master_seed, k)`.
pub fn compare_models(
    bundle: &GrandModelBundle,
    priors: &[PriorSpec],
    data: &Dataset,
    config: &McmcConfig,
    master_seed: u64,
) -> Result<ModelRanking> {
    if priors.len() != bundle.reformulated.len() {
        return Err(BetelError::DimensionMismatch {
            expected: bundle.reformulated.len(),
            got: priors.len(),
        });
    }
    // Absent columns and the like are the caller's mistake, not a model failure.
    for model in &bundle.reformulated {
        if let Err(e) = model.eval_moments_flat(&vec![0.0; model.dim()], data) {
            if e.is_config_error() {
                return Err(e);
            }
        }
    }
    let results = bundle
        .reformulated
        .par_iter()
        .zip(priors.par_iter())
        .enumerate()
        .map(|(k, (model, prior))| {
            let r = log_marginal_likelihood(model, prior, data, config, derive_seed(master_seed, k as u64));
            (model.name().to_string(), r)
        })
        .collect();
    Ok(ModelRanking::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::run_mh;
    use nalgebra::DMatrix;

    fn proposal_chain(q: &TailoredProposal, s: usize, seed: u64) -> PosteriorChain {
        let f = |x: &[f64]| q.log_density(x);
        run_mh(&f, q, s, 0, seed, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn ordinate_of_proposal_target_is_its_density() {
        let disp = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let q = TailoredProposal::new(vec![0.2, -0.4], disp, 15.0).unwrap();
        let chain = proposal_chain(&q, 20_000, 3);
        let psi = [0.5, 0.0];
        let f = |x: &[f64]| q.log_density(x);
        let (lo, err) = posterior_ordinate(&chain, &q, &psi, &f, 20_000, 4).unwrap();
        // α ≡ 1, so both averages are exact
        assert!((lo - q.log_density(&psi)).abs() <= 3.0 * err.max(1e-12), "{lo} {err}");
    }

    #[test]
    fn identity_holds_arithmetically() {
        let e = MarginalLikelihoodEstimate::from_parts(-3.25, -120.5, 1.75);
        assert_eq!(e.log_ml, e.log_prior_at + e.log_lik_at - e.log_ordinate_at);
    }

    #[test]
    fn ordinate_fails_when_proposal_never_reaches_support() {
        let q = TailoredProposal::new(vec![0.0], DMatrix::from_element(1, 1, 1.0), 15.0).unwrap();
        let chain = PosteriorChain {
            labels: vec!["a".into()],
            draws: vec![vec![100.0]; 20],
            log_posts: vec![0.0; 20],
            accepted: vec![false; 20],
            burn_in: 0,
            seed: 0,
        };
        let target = |x: &[f64]| if (x[0] - 100.0).abs() < 1e-3 { 0.0 } else { f64::NEG_INFINITY };
        let r = posterior_ordinate(&chain, &q, &[100.0], &target, 100, 1);
        assert!(matches!(r, Err(BetelError::DegenerateOrdinate)));
    }

    fn fake(log_ml: f64) -> Result<MarginalLikelihoodEstimate> {
        Ok(MarginalLikelihoodEstimate::from_parts(log_ml, 0.0, 0.0))
    }

    #[test]
    fn ranking_orders_breaks_ties_and_marks_failures() {
        let r = ModelRanking::from_results(vec![
            ("a".into(), fake(-10.0)),
            ("b".into(), Err(BetelError::DegenerateOrdinate)),
            ("c".into(), fake(-5.0)),
            ("d".into(), fake(-5.0)),
        ]);
        assert_eq!(r.order, vec![2, 3, 0]);
        assert_eq!(r.winner().unwrap().name, "c");
        assert_eq!(r.failures(), 1);
        assert_eq!(r.log_bayes_factor(2, 0), Some(5.0));
        assert_eq!(r.log_bayes_factor(1, 0), None);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(2).unwrap().starts_with("b,,"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json["log_bayes_factors"][1][0].is_null());
    }
}
