//! Contextual robust optimization with learned ellipsoidal uncertainty sets.
//!
//! A set predictor maps covariates to an ellipsoid; the portfolio decision is
//! the minimizer of the worst-case cost over that set. Training
//! differentiates through the robust solve and through a fitted coverage
//! regressor so the sets reach a target conditional coverage while keeping
//! downstream tail risk low.

pub mod baselines;
pub mod coverage;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod implicit;
pub mod nn;
pub mod risk;
pub mod solver;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
