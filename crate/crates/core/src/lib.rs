//! Bayesian Markov-switching partial reduced-rank regression.
//!
//! Each hidden state splits the responses into a low-rank group, regressed
//! on the covariates through a rank-`r` coefficient matrix `C = B Aᵀ`, and a
//! flexible group driven by Gaussian-process functions of the covariates.
//! Errors have a factor stochastic-volatility covariance. Posterior
//! inference uses a partially collapsed Gibbs sampler.

pub mod config;
pub mod continuous;
pub mod covariance;
pub mod discrete;
pub mod data;
pub mod error;
pub mod gp;
pub mod grrr;
pub mod hmm;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod simulation;
pub mod state;
pub mod store;
pub mod sv;

pub use config::{validate, PriorConfig};
pub use data::Dataset;
pub use error::{Error, Result};
pub use state::{init_state, ChainState, StateParams};
