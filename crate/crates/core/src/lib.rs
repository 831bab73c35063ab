//! Structured filter pruning for convolutional networks.
//!
//! The crate bundles a small deterministic CPU runtime ([`ops`], [`runtime`],
//! [`train`]), a layer-graph model with FLOP accounting and a checksummed file
//! format ([`graph`]), filter scoring and structural pruning ([`pruning`]), and
//! experiment drivers for sensitivity sweeps and retraining ([`strategy`]).

pub mod data;
pub mod error;
pub mod graph;
pub mod ops;
pub mod pruning;
pub mod runtime;
pub mod strategy;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor4;
