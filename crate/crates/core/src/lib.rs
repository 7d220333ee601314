//! Weakly supervised invariant representation learning.
//!
//! A VAE whose latent code is split into predictive, known-nuisance and
//! unknown-nuisance slices, trained with detect-and-swap pair supervision,
//! a class-average reconstruction regularizer and supervised contrastive
//! alignment. Also ships the disentanglement metrics and white-box attacks
//! used to evaluate the learned representations.

pub mod attack;
pub mod error;
pub mod forge;
pub mod invariance;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod swap;
pub mod tape;
pub mod trainer;
pub mod vae;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
