//! Minimal reverse-mode autodiff over dense f64 tensors, plus parameter
//! storage (Adam, freeze groups), checkpointing, and finite-difference
//! gradient verification. This is the numeric substrate for the encoders,
//! losses and trainers in the rest of the crate.

pub mod checkpoint;
pub mod gradcheck;
pub mod store;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_store, save_store};
pub use gradcheck::grad_check;
pub use store::{AdamConfig, ParamStore};
pub use tape::{BatchStats, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;
