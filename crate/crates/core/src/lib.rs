//! Causal disentanglement hidden Markov model for cross-domain bearing fault
//! diagnosis.

pub mod autograd;
pub mod error;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod signal;

pub use error::{Error, Result};
pub mod train;
pub mod eval;
