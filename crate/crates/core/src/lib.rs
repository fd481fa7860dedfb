//! Spiking neural networks trained with surrogate gradients through time.

pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod normalization;
pub mod ops;
pub mod snn;
pub mod tensor;
pub mod train;
pub mod tuner;

pub use error::{Error, Result};
pub use graph::{Backward, Graph, Var};
pub use tensor::{Real, Tensor};
