//! Behavior-set estimation for multi-source offline data.
//!
//! A vector-quantized latent variable model assigns each trajectory to one
//! of `K` Gaussian behavior policies that share state and action encoders.
//! The learned set then regularizes an actor-critic learner against the
//! behavior policy of each transition's own trajectory (LBRAC-v).

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod fileio;
pub mod networks;
pub mod env;
pub mod dataset;
pub mod behavior;
pub mod lbrac;
pub mod viz;
pub mod cli;
