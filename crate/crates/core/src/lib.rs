//! Bayesian exponentially tilted empirical likelihood for moment condition
//! models: posterior sampling, marginal likelihoods and model comparison.

pub mod compare;
pub mod data;
pub mod dgp;
pub mod error;
pub mod etel;
pub mod experiment;
pub mod misspec;
pub mod moment_model;
pub mod optim;
pub mod posterior;
pub mod seed;

pub use data::Dataset;
pub use error::{BetelError, Result};
