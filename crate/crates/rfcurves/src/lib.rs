//! Asymptotic learning curves for random-feature elastic-net regression, and a
//! finite-size simulator to check them against.

pub mod error;
pub mod numerics;
pub mod regularizers;
pub mod predictor;
pub mod saddle;
pub mod simulator;
pub mod sweep;

pub use error::{Error, Result};
