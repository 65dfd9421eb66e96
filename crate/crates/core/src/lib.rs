//! Tuning-free PAC-Bayes training for small dense networks.
//!
//! Pipeline: estimate the exponential-moment curve `K(λ)` from prior
//! samples ([`kbound`]), minimize the PAC-Bayes objective over the model,
//! posterior and prior variances ([`pacloss`], [`trainer`]), then freeze
//! the learned noise and finish with noise-injected training. The trained
//! run can be turned into a numerical generalization certificate
//! ([`certify`]).

pub mod autodiff;
pub mod bayes;
pub mod certify;
pub mod config;
pub mod data;
pub mod error;
pub mod kbound;
pub mod nn;
pub mod pacloss;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
