//! Synthetic data, training, evaluation and checkpointing around the
//! component-aware transformer.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use synth::{Split, SynthSample, World};
pub use train::{StepLog, Trainer};
