//! Synthetic dataset generation, persistence and raster utilities.

mod raster;
mod rle;
mod scene;
mod store;

pub use raster::{pad_to_grid, stitch, tile_raster, unpad, Extent, PositionedTile};
pub use rle::{rle_decode, rle_encode};
pub use scene::{
    generate_scene, AnnotatedTile, Instance, Provenance, SceneConfig, HIGH_CENTERED, LOW_CENTERED, MAX_EXTENT,
    MAX_POLYGONS, MIN_EXTENT,
};
pub use store::{
    generate_dataset, manifest_hash, read_png, split_dataset, tile_id, tile_seed, write_dataset, Dataset,
    DatasetConfig, DatasetSplit, ManifestHeader, MANIFEST_FILE, MANIFEST_MAGIC, SPLIT_FILE,
};
