//! Instruction-conditioned dense retrieval with a pluggable, prunable
//! intent introspector, plus the synthetic data pipeline and evaluation
//! harness that exercise it end to end at desk scale.

pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod introspect;
pub mod numcore;
pub mod pipeline;
pub mod pruning;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
