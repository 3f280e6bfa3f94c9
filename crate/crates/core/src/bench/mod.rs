//! Throughput measurement, slot-count sweeps and whole-raster prediction.

mod fps;
mod predict;
mod sweep;

pub use fps::*;
pub use predict::*;
pub use sweep::*;
