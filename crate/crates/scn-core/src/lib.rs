//! Slot-contrastive representation learning on synthetic moving sprites.
//!
//! The crate is a self-contained pipeline: a deterministic bouncing-sprite
//! world with an on-disk dataset format, a small reverse-mode tensor kernel, a
//! slot-structured CNN encoder trained with time-contrastive and slot-diversity
//! objectives, and a linear-probe evaluation suite (accuracy, compactness,
//! modularity). Everything is seeded and single-threaded-deterministic: same
//! config, same bytes.

pub mod dataset;
pub mod element;
pub mod error;
mod fsio;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod world;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
