//! Minimal reverse-mode differentiable tensor engine.
//!
//! [`Graph`] records operations eagerly; [`Graph::backward`] sweeps the tape
//! in reverse. Parameters live in a [`ParamSet`] and are updated by [`Sgd`].
//! The engine is generic over [`Real`] so gradient checks can run in `f64`
//! while training and benchmarking run in `f32`.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Activation, Gradients, Graph, NodeId, PoolKind};
pub use params::{sgd_step, ParamSet, Sgd};
pub use tensor::{numel, Real, Tensor};
