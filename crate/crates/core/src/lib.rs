//! Variational factorization machines.
//!
//! A factorization machine scores a sparse feature vector with a global bias,
//! one bias per active feature and the pairwise dot products of the active
//! features' embeddings. This crate learns a mean-field Gaussian posterior over
//! all of those parameters by maximizing a debiased mini-batch ELBO with Adam,
//! and uses the resulting predictive uncertainty to pick which items to ask a
//! new user about.
//!
//! Module map:
//!
//! * [`data`]: sparse instances, feature spaces, MovieLens and libsvm ingestion, splits
//! * [`fm`]: deterministic prediction for a concrete parameter draw
//! * [`params`]: variational parameters, initialization, reparameterized sampling
//! * [`elbo`], [`adam`], [`averaging`], [`train`]: the variational trainer
//! * [`metrics`]: RMSE, accuracy, AUC, MAP, predictive variance
//! * [`elicitation`]: query selection strategies and the simulated protocol
//! * [`checkpoint`], [`config`]: on-disk formats

pub mod adam;
pub mod averaging;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elbo;
pub mod elicitation;
mod error;
pub mod fm;
pub mod metrics;
pub mod noise;
pub mod params;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
