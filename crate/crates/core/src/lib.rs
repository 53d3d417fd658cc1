//! Model-compression toolkit: train small CNNs with iterative magnitude pruning, turn the
//! resulting sparse variants into physically smaller models by removing all-zero channels, and
//! serve a deflated, size-ordered portfolio that switches variants as load changes.

pub mod data;
pub mod error;
pub mod format;
pub mod forward;
pub mod kernels;
pub mod model;
pub mod par;
pub mod profile;
pub mod runtime;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use forward::{forward, forward_with, ConvAlgo};
pub use model::{Layer, ModelGraph};
pub use tensor::Tensor;
