use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{BetelError, Result};
use crate::etel::etel_estimate;

use super::MomentModel;

pub const DEFAULT_PRIOR_DF: f64 = 2.5;
pub const DEFAULT_PRIOR_DISPERSION: f64 = 5.0;

/// Scaled Student-t marginal t_ν(location, dispersion²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTPrior {
    pub location: f64,
    pub dispersion: f64,
    pub df: f64,
}

impl StudentTPrior {
    pub fn new(location: f64, dispersion: f64, df: f64) -> Result<Self> {
        if !(dispersion > 0.0 && dispersion.is_finite()) || !(df > 0.0 && df.is_finite()) {
            return Err(BetelError::Config(format!(
                "prior needs positive dispersion and df, got {dispersion} and {df}"
            )));
        }
        if !location.is_finite() {
            return Err(BetelError::Config("prior location must be finite".into()));
        }
        Ok(Self { location, dispersion, df })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let nu = self.df;
        let z = (x - self.location) / self.dispersion;
        ln_gamma(0.5 * (nu + 1.0))
            - ln_gamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - self.dispersion.ln()
            - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let w = ChiSquared::new(self.df).expect("df validated").sample(rng);
        self.location + self.dispersion * z * (self.df / w).sqrt()
    }
}

/// Independent Student-t prior over the coordinates of ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub components: Vec<StudentTPrior>,
}

impl PriorSpec {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn log_density(&self, psi: &[f64]) -> f64 {
        debug_assert_eq!(psi.len(), self.components.len());
        self.components.iter().zip(psi).map(|(c, x)| c.log_density(*x)).sum()
    }

    pub fn locations(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.location).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }
}

/// t_{2.5}(0, 5²) on every coordinate of ψ.
pub fn default_prior(dim: usize) -> PriorSpec {
    let c = StudentTPrior {
        location: 0.0,
        dispersion: DEFAULT_PRIOR_DISPERSION,
        df: DEFAULT_PRIOR_DF,
    };
    PriorSpec { components: vec![c; dim] }
}

/// Default prior recentred at the ETEL estimate computed on `training`.
pub fn training_sample_prior(model: &MomentModel, training: &Dataset) -> Result<PriorSpec> {
    let start = model.initial_point(training)?;
    let estimate = etel_estimate(model, training, &start)?;
    let mut prior = default_prior(model.dim());
    for (c, loc) in prior.components.iter_mut().zip(estimate.to_vec()) {
        c.location = loc;
    }
    Ok(prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cauchy_special_case() {
        let c = StudentTPrior::new(0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(c.log_density(1.0), -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let c = StudentTPrior::new(0.3, 5.0, 2.5).unwrap();
        let h = 0.01;
        let total: f64 = (-200_000..200_000).map(|k| c.log_density(k as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn mode_at_location() {
        let p = default_prior(3);
        let at_zero = p.log_density(&[0.0; 3]);
        for x in [[0.1, 0.0, 0.0], [0.0, -3.0, 0.0], [1e-6, 1e-6, 1e-6]] {
            assert!(p.log_density(&x) < at_zero);
        }
    }

    #[test]
    fn rejects_nonpositive_dispersion() {
        assert!(StudentTPrior::new(0.0, 0.0, 2.5).is_err());
        assert!(StudentTPrior::new(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn samples_have_expected_spread() {
        let c = StudentTPrior::new(1.0, 2.0, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..40_000).map(|_| c.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        // var of t_ν is s²ν/(ν−2)
        assert!((mean - 1.0).abs() < 0.05);
        assert!((var - 4.0 * 30.0 / 28.0).abs() < 0.15, "{var}");
    }
}
