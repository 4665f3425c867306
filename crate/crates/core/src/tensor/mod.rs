//! Dense `f64` tensors with a reverse-mode autodiff tape.

mod deform;
pub mod geometry;
mod linalg;
mod nn;
mod optim;
pub mod spatial;
mod tape;
mod value;

pub use optim::{cosine_lr, AdamConfig, AdamState};
pub use tape::{Diagnostics, Gradients, OpKind, Tape, Var};
pub use value::Tensor;
