//! Deconfounding bias correction for climate model output.
//!
//! A recurrent factor model infers a latent substitute for hidden confounders
//! from paired GCM and observation histories; a forecaster then predicts the
//! per-step bias `y_obs - y_gcm` from current covariates and the inferred
//! latents, and the prediction is added to the raw GCM output. Classical
//! baselines, a synthetic generator with known confounders and evaluation
//! metrics complete the toolkit.

pub mod autodiff;
pub mod baselines;
pub mod corrector;
pub mod data;
pub mod deconfounder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod quantile;
pub mod synthgen;

pub use error::{Error, Result};
