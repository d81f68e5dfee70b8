//! Retrieval-grounded visual priors for open-vocabulary detection.
//!
//! The crate builds a scene-aware memory of grounded regions, searches it
//! with an exact or IVF-PQ index, aggregates category prototypes, projects
//! them into dense heatmaps and sparse anchors, and fuses those priors into
//! memory-guided prompt embeddings with label-constrained decoding.

mod codec;
pub mod ann;
pub mod embedding;
pub mod error;
pub mod memory;
pub mod pipeline;
pub mod priors;
pub mod refine;
pub mod retrieval;
pub mod seed;

pub use codec::write_atomic;
pub use error::{Error, Result};
