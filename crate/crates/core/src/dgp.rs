//! Data-generating processes for the simulation designs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::error::{BetelError, Result};
use crate::etel::{solve_tilting_with, SolveStatus, TiltingOptions};
use crate::moment_model::MomentMatrix;

/// Finite mixture of normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl NormalMixture {
    /// 0.5·N(0.75, 0.75²) + 0.5·N(−0.75, 1.25²): mean 0, variance 1.625.
    pub fn skewed() -> Self {
        Self { weights: vec![0.5, 0.5], means: vec![0.75, -0.75], sds: vec![0.75, 1.25] }
    }

    /// 0.5·N(0.5, 0.5²) + 0.5·N(−0.5, 1.118²).
    pub fn iv_error() -> Self {
        Self { weights: vec![0.5, 0.5], means: vec![0.5, -0.5], sds: vec![0.5, 1.118] }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sds.len() != k {
            return Err(BetelError::InvalidDgp("mixture component lists differ in length".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BetelError::InvalidDgp("mixture weights must be a probability vector".into()));
        }
        if self.sds.iter().any(|s| !(*s > 0.0)) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(BetelError::InvalidDgp("mixture components need finite means, sd > 0".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// E[(X − μ)^k] for k ≤ 4, from the component moments.
    pub fn central_moment(&self, k: u32) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (m, s))| {
                let d = m - mu;
                let s2 = s * s;
                w * match k {
                    1 => d,
                    2 => d * d + s2,
                    3 => d.powi(3) + 3.0 * d * s2,
                    4 => d.powi(4) + 6.0 * d * d * s2 + 3.0 * s2 * s2,
                    _ => panic!("central moment of order {k} not supported"),
                }
            })
            .sum()
    }

    pub fn variance(&self) -> f64 {
        self.central_moment(2)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (m, s))| w * std_normal_cdf((x - m) / s))
            .sum()
    }

    /// Inverse CDF by bisection to an absolute width of 1e-12.
    pub fn quantile(&self, u: f64) -> f64 {
        let spread = self.sds.iter().fold(0.0_f64, |a, b| a.max(*b));
        let (mut lo, mut hi) = self
            .means
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), m| (l.min(*m), h.max(*m)));
        lo -= 40.0 * spread;
        hi += 40.0 * spread;
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < u { lo = mid } else { hi = mid }
        }
        0.5 * (lo + hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.sds[k] * z
    }
}

fn default_alpha() -> f64 {
    0.0
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn count_beta() -> Vec<f64> {
    vec![1.0, 1.0, 0.0]
}
fn count_x_mean() -> f64 {
    0.4
}
fn count_x_sd() -> f64 {
    1.0 / 3.0
}

/// y = α + βz + e, z ~ N(z_mean, z_sd²), e from `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionDesign {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "half")]
    pub z_mean: f64,
    #[serde(default = "one")]
    pub z_sd: f64,
    #[serde(default = "NormalMixture::skewed")]
    pub error: NormalMixture,
}

/// y = α + βz + σ·N(0,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalRegressionDesign {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "half")]
    pub z_mean: f64,
    #[serde(default = "one")]
    pub z_sd: f64,
    #[serde(default = "one")]
    pub sigma: f64,
}

/// y = location + e.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationDesign {
    #[serde(default = "default_alpha")]
    pub location: f64,
    #[serde(default = "NormalMixture::skewed")]
    pub error: NormalMixture,
}

/// Count regressions with log μ = x'β, x_j ~ N(x_mean, x_sd²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountDesign {
    #[serde(default = "count_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "count_x_mean")]
    pub x_mean: f64,
    #[serde(default = "count_x_sd")]
    pub x_sd: f64,
    /// Negative binomial success probability; ignored by the Poisson design.
    #[serde(default = "half")]
    pub p: f64,
}

fn iv_alpha() -> f64 {
    1.0
}
fn iv_delta() -> f64 {
    0.7
}
fn iv_rho() -> f64 {
    0.7
}

/// y = α + βx + δw + ε, x = z₁ + z₂ + w + u, (ε, u) from a Gaussian copula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvDesign {
    #[serde(default = "iv_alpha")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default = "iv_delta")]
    pub delta: f64,
    #[serde(default = "iv_rho")]
    pub rho: f64,
    #[serde(default = "half")]
    pub z_mean: f64,
    #[serde(default = "NormalMixture::iv_error")]
    pub error: NormalMixture,
}

fn population_size() -> usize {
    100_000
}
fn noise_sd() -> f64 {
    20.0
}

/// Counts resampled from a heavy-tailed population with ETEL weights that
/// enforce E[(y − exp(x'β))x_j] = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampledCountDesign {
    #[serde(default = "count_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "count_x_mean")]
    pub x_mean: f64,
    #[serde(default = "count_x_sd")]
    pub x_sd: f64,
    #[serde(default = "noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "population_size")]
    pub population: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpKind {
    SkewedRegression(RegressionDesign),
    NormalRegression(NormalRegressionDesign),
    LocationOnly(LocationDesign),
    PoissonReg(CountDesign),
    NegbinReg(CountDesign),
    IvCopula(IvDesign),
    MomentResampledCounts(ResampledCountDesign),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(flatten)]
    pub kind: DgpKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed }
    }

    pub fn with(&self, n: usize, seed: u64) -> Self {
        Self { kind: self.kind.clone(), n, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(BetelError::InvalidDgp(msg.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        match &self.kind {
            DgpKind::SkewedRegression(d) => {
                d.error.validate()?;
                if !(d.z_sd > 0.0) {
                    return bad("z_sd must be positive");
                }
            }
            DgpKind::NormalRegression(d) => {
                if !(d.z_sd > 0.0 && d.sigma > 0.0) {
                    return bad("z_sd and sigma must be positive");
                }
            }
            DgpKind::LocationOnly(d) => d.error.validate()?,
            DgpKind::PoissonReg(d) | DgpKind::NegbinReg(d) => {
                if d.beta.is_empty() || !(d.x_sd > 0.0) {
                    return bad("count designs need coefficients and x_sd > 0");
                }
                if !(d.p > 0.0 && d.p < 1.0) {
                    return bad("p must lie in (0, 1)");
                }
            }
            DgpKind::IvCopula(d) => {
                d.error.validate()?;
                if !(d.rho > -1.0 && d.rho < 1.0) {
                    return bad("copula correlation must lie in (-1, 1)");
                }
            }
            DgpKind::MomentResampledCounts(d) => {
                if d.beta.len() < 2 || !(d.x_sd > 0.0) || !(d.noise_sd >= 0.0) || d.population < 10 {
                    return bad("resampled design needs two or more coefficients, x_sd > 0, a population");
                }
            }
        }
        Ok(())
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let d = Normal::new(mean, sd).expect("validated");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn regressor_columns<R: Rng>(rng: &mut R, n: usize, k: usize, mean: f64, sd: f64) -> Vec<Vec<f64>> {
    let d = Normal::new(mean, sd).expect("validated");
    let mut cols = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        for c in cols.iter_mut() {
            c.push(d.sample(rng));
        }
    }
    cols
}

fn count_dataset(y: Vec<f64>, xs: Vec<Vec<f64>>) -> Result<Dataset> {
    let mut pairs = vec![("y".to_string(), y)];
    for (j, x) in xs.into_iter().enumerate() {
        pairs.push((format!("x{}", j + 1), x));
    }
    Dataset::from_columns(pairs)
}

fn linear_index(xs: &[Vec<f64>], beta: &[f64], i: usize) -> f64 {
    xs.iter().zip(beta).map(|(x, b)| x[i] * b).sum()
}

fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean < 1e-300 {
        return 0.0;
    }
    Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// Draws `spec.n` observations; reproducible from `spec.seed`.
///
/// Columns: `y, z` for regressions, `y` for the location design, `y, x1, ..`
/// for count designs, `y, x, w, z1, z2` for the IV design.
pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    match &spec.kind {
        DgpKind::SkewedRegression(d) => {
            let z = normals(&mut rng, n, d.z_mean, d.z_sd);
            let y = z.iter().map(|zi| d.alpha + d.beta * zi + d.error.sample(&mut rng)).collect();
            Dataset::from_columns(vec![("y", y), ("z", z)])
        }
        DgpKind::NormalRegression(d) => {
            let z = normals(&mut rng, n, d.z_mean, d.z_sd);
            let y = z
                .iter()
                .map(|zi| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    d.alpha + d.beta * zi + d.sigma * e
                })
                .collect();
            Dataset::from_columns(vec![("y", y), ("z", z)])
        }
        DgpKind::LocationOnly(d) => {
            let y = (0..n).map(|_| d.location + d.error.sample(&mut rng)).collect();
            Dataset::from_columns(vec![("y", y)])
        }
        DgpKind::PoissonReg(d) => {
            let xs = regressor_columns(&mut rng, n, d.beta.len(), d.x_mean, d.x_sd);
            let y = (0..n).map(|i| poisson_draw(&mut rng, linear_index(&xs, &d.beta, i).exp())).collect();
            count_dataset(y, xs)
        }
        DgpKind::NegbinReg(d) => {
            // NB(r, p) with r = μ p/(1−p) as a gamma-Poisson mixture:
            // mean μ, variance μ/p.
            let xs = regressor_columns(&mut rng, n, d.beta.len(), d.x_mean, d.x_sd);
            let y = (0..n)
                .map(|i| {
                    let mu = linear_index(&xs, &d.beta, i).exp();
                    let shape = mu * d.p / (1.0 - d.p);
                    let rate = Gamma::new(shape, (1.0 - d.p) / d.p).map(|g| g.sample(&mut rng));
                    poisson_draw(&mut rng, rate.unwrap_or(0.0))
                })
                .collect();
            count_dataset(y, xs)
        }
        DgpKind::IvCopula(d) => {
            let unif = Uniform::new(0.0, 1.0).expect("valid bounds");
            let root = (1.0 - d.rho * d.rho).sqrt();
            let mut cols: [Vec<f64>; 5] = Default::default();
            for _ in 0..n {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let u = d.rho * a + root * b;
                let eps = d.error.quantile(std_normal_cdf(a));
                let n1: f64 = StandardNormal.sample(&mut rng);
                let n2: f64 = StandardNormal.sample(&mut rng);
                let (z1, z2) = (d.z_mean + n1, d.z_mean + n2);
                let w = unif.sample(&mut rng);
                let x = z1 + z2 + w + u;
                let y = d.alpha + d.beta * x + d.delta * w + eps;
                for (c, v) in cols.iter_mut().zip([y, x, w, z1, z2]) {
                    c.push(v);
                }
            }
            let [y, x, w, z1, z2] = cols;
            Dataset::from_columns(vec![("y", y), ("x", x), ("w", w), ("z1", z1), ("z2", z2)])
        }
        DgpKind::MomentResampledCounts(d) => resampled_counts(d, n, &mut rng),
    }
}

fn resampled_counts(d: &ResampledCountDesign, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let big = d.population;
    let k = d.beta.len();
    let xs = regressor_columns(rng, big, k, d.x_mean, d.x_sd);
    let y: Vec<f64> = (0..big)
        .map(|i| {
            let e: f64 = StandardNormal.sample(rng);
            let eta = d.beta[0] * xs[0][i] + d.beta[1] * xs[1][i] + d.noise_sd * e;
            eta.exp().floor().clamp(0.0, f64::MAX)
        })
        .collect();
    // Moment rows (y − exp(x'β)) x_j, each column rescaled by its median
    // absolute value; the tilted weights do not depend on the scaling.
    let mut rows = vec![0.0; big * k];
    for i in 0..big {
        let r = y[i] - linear_index(&xs, &d.beta, i).exp();
        for j in 0..k {
            rows[i * k + j] = r * xs[j][i];
        }
    }
    for j in 0..k {
        let mut col: Vec<f64> = (0..big).map(|i| rows[i * k + j].abs()).collect();
        let mid = col.len() / 2;
        let s = *col.select_nth_unstable_by(mid, f64::total_cmp).1;
        if s > 0.0 {
            (0..big).for_each(|i| rows[i * k + j] /= s);
        }
    }
    let g = MomentMatrix::new(big, k, rows)?;
    // Entries span dozens of orders of magnitude, so the gradient tolerance is
    // relative to the largest entry.
    let scale = g.as_slice().iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let opts = TiltingOptions { grad_tol: 1e-10 * scale, max_iter: 1000, ..Default::default() };
    let sol = solve_tilting_with(&g, &opts);
    if sol.status != SolveStatus::Converged {
        return Err(BetelError::InvalidDgp(format!(
            "population tilting failed: {:?}",
            sol.status
        )));
    }
    let mut cum = Vec::with_capacity(big);
    let mut acc = 0.0;
    for w in &sol.weights {
        acc += w;
        cum.push(acc);
    }
    let idx: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cum.partition_point(|c| *c <= u).min(big - 1)
        })
        .collect();
    let full = count_dataset(y, xs)?;
    Ok(full.select_rows(&idx))
}
