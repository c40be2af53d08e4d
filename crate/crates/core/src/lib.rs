//! Multivariate time-series forecaster combining hybrid seasonal/trend
//! decomposition, noisy top-k routing over multi-scale attention experts and a
//! dual CNN/MLP stream, built on a small reverse-mode tensor engine.

pub mod dataio;
pub mod decomp;
pub mod error;
pub mod experts;
pub mod gating;
pub mod model;
pub mod ndgrad;
pub mod nn;
pub mod streams;

pub use error::{Error, Result};
