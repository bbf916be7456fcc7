//! Dynamic topic models with Gaussian-process topic trajectories, trained
//! by stochastic variational inference over a sparse inducing-point
//! representation.
//!
//! The crate is organized bottom-up:
//! - [`kernels`]: covariance functions, gram matrices, inducing-point
//!   quantities;
//! - [`corpus`]: tokenization, vocabulary filtering, encoding, splits;
//! - [`state`]: configuration, variational parameters, initialization,
//!   checkpoints;
//! - [`inference`]: the local updates, ELBO, natural gradients, and the
//!   SVI training loop;
//! - [`evaluation`]: topic extraction, word trajectories, held-out
//!   perplexity.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod kernels;
pub mod math;
pub mod state;

mod binio;

pub use error::{Error, Result};
