//! Component-aware transformer for one-stage whole-body mesh recovery.
//!
//! The crate is organized bottom-up: [`tensor`] provides the autodiff
//! substrate, [`body`] the parametric body model, [`model`] the encoder and
//! component decoder, and [`loss`]/[`metrics`] the training objective and
//! evaluation suite.

pub mod body;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
