//! Split computing with injected bottlenecks.
//!
//! The crate covers the whole pipeline: teacher classifiers expressed as layer
//! sequences ([`model`]), encoder/decoder bottleneck injection and head/tail
//! partitioning ([`bottleneck`]), multi-stage distillation training
//! ([`distill`]), 8-bit bottleneck quantization ([`codec`]), networked split
//! inference ([`runtime`]), the delay/energy trade-off model ([`sim`]) and
//! accuracy tables ([`report`]).

pub mod bottleneck;
pub mod codec;
pub mod distill;
pub mod error;
pub mod model;
pub mod report;
pub mod runtime;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
