//! Tree dormancy phenology: classical chill/forcing models, a differentiable
//! hybrid model with a learned chill response, calibration, training and
//! evaluation protocols.

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod domain;
mod error;
pub mod eval;
pub mod hybrid;
pub mod mechanistic;
pub mod rng;

pub use error::{Error, Result};
