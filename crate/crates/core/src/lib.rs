//! Coupled (Kronecker-factored) attention for vision transformers.
//!
//! The attention map over an `h×w` token grid is replaced by `A ⊗ B`, where
//! `A` (`h×h`) scores rows of the feature map against each other and `B`
//! (`w×w`) scores columns. Because `(A ⊗ B)·row(X) = row(A·X·Bᵀ)`, the
//! `hw×hw` map is never materialized on the fast path.
//!
//! Modules, bottom-up: [`tensor`] (dense kernels and the CPLT file format),
//! [`autograd`] (tape-based reverse mode), [`attention`], [`model`],
//! [`train`], [`bench`] (cost accounting) and [`cli`].

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod init;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
