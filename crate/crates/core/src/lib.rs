//! Bayesian mixture-model clustering with split-merge MCMC.

pub mod cli;
pub mod components;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod priors;
pub mod rng;
pub mod sampler;
pub mod special;
pub mod summarize;
pub mod synth;

pub use error::{Error, Result};
