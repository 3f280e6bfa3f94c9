//! Real-time sparse instance segmentation built from primitives.
//!
//! The pipeline is a residual feature extractor ([`backbone`]), an instance
//! context encoder ([`encoder`]) and an instance-activation-map decoder
//! ([`decoder`]), trained with bipartite matching ([`matching`]) and scored
//! with mask average precision ([`evaluator`]). [`datagen`] synthesizes
//! polygonal-terrain scenes and [`bench`] holds the benchmark, sweep and
//! prediction drivers behind the `sparseseg` command line.

pub mod bench;
pub mod backbone;
pub mod datagen;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evaluator;
mod layers;
pub mod mask;
pub mod matching;
pub mod model;

pub use error::{Error, Result};
