//! Dataset generation, the on-disk manifest and train/val/test splits.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.iwp      "IWPDS1", a header JSON line, one JSON line per tile
//! split.json        train/val/test tile ids
//! images/<id>.png   8-bit RGB
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rle::{rle_decode, rle_encode};
use super::scene::{generate_scene, AnnotatedTile, Instance, Provenance, SceneConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_MAGIC: &str = "IWPDS1";
pub const MANIFEST_FILE: &str = "manifest.iwp";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_tiles: usize,
    pub master_seed: u64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_tiles: 64, master_seed: 0, scene: SceneConfig::default() }
    }
}

/// Child seed for tile `index`, independent of generation order.
pub fn tile_seed(master_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn tile_id(index: usize) -> String {
    format!("tile_{index:05}")
}

/// Generates every tile; `parallel` only changes the schedule, not the output.
pub fn generate_dataset(cfg: &DatasetConfig, parallel: bool) -> Result<Vec<AnnotatedTile>> {
    cfg.scene.validate()?;
    let one = |i: usize| {
        let scene = SceneConfig { seed: tile_seed(cfg.master_seed, i), ..cfg.scene.clone() };
        generate_scene(&scene, tile_id(i))
    };
    if parallel {
        (0..cfg.n_tiles).into_par_iter().map(one).collect()
    } else {
        (0..cfg.n_tiles).map(one).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub tile_count: usize,
    pub instance_count: usize,
    pub master_seed: u64,
    pub config_hash: String,
    pub scene: SceneConfig,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class_id: usize,
    area: usize,
    rle: String,
    polygon: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct TileRecord {
    tile_id: String,
    image: String,
    height: usize,
    width: usize,
    seed: u64,
    config_hash: String,
    instances: Vec<InstanceRecord>,
}

/// Polygon vertices are stored at 1/100 pixel.
fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn encode_png(tile: &AnnotatedTile) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let (h, w) = tile.extent();
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&tile.rgb_bytes(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: tile.tile_id.clone().into(), message: e.to_string() })?;
    Ok(buf)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = raw[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes images, manifest and split to `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, tiles: &[AnnotatedTile]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let pngs: Vec<Vec<u8>> = tiles.par_iter().map(encode_png).collect::<Result<_>>()?;
    let mut manifest = Vec::new();
    writeln!(manifest, "{MANIFEST_MAGIC}")?;
    let header = ManifestHeader {
        tile_count: tiles.len(),
        instance_count: tiles.iter().map(|t| t.instances.len()).sum(),
        master_seed: cfg.master_seed,
        config_hash: cfg.scene.hash(),
        scene: cfg.scene.clone(),
    };
    writeln!(manifest, "{}", serde_json::to_string(&header)?)?;
    for (tile, png) in tiles.iter().zip(pngs) {
        let image = format!("images/{}.png", tile.tile_id);
        fs::write(dir.join(&image), png)?;
        let (height, width) = tile.extent();
        let rec = TileRecord {
            tile_id: tile.tile_id.clone(),
            image,
            height,
            width,
            seed: tile.provenance.seed,
            config_hash: tile.provenance.config_hash.clone(),
            instances: tile
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    class_id: i.class_id,
                    area: i.mask.area(),
                    rle: rle_encode(&i.mask),
                    polygon: i.polygon.iter().map(|p| [round2(p[0]), round2(p[1])]).collect(),
                })
                .collect(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
    if ids.len() >= 3 {
        let split = split_dataset(&ids, cfg.master_seed)?;
        fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&split)?)?;
    }
    Ok(())
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub tiles: Vec<AnnotatedTile>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bad = |line: usize, msg: String| Error::Manifest(format!("{}:{line}: {msg}", path.display()));
        let mut lines = BufReader::new(fs::File::open(&path)?).lines();
        match lines.next().transpose()? {
            Some(ref m) if m == MANIFEST_MAGIC => {}
            other => return Err(bad(1, format!("expected {MANIFEST_MAGIC} header, found {other:?}"))),
        }
        let header_line = lines.next().transpose()?.ok_or_else(|| bad(2, "missing header record".into()))?;
        let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| bad(2, e.to_string()))?;
        let mut tiles = Vec::with_capacity(header.tile_count);
        for (k, line) in lines.enumerate() {
            let line = line?;
            let rec: TileRecord = serde_json::from_str(&line).map_err(|e| bad(k + 3, e.to_string()))?;
            let image = read_png(&dir.join(&rec.image))?;
            if image.shape()[1..] != [rec.height, rec.width] {
                return Err(bad(k + 3, format!("image {} does not match recorded extent", rec.image)));
            }
            let instances = rec
                .instances
                .into_iter()
                .map(|i| {
                    Ok(Instance {
                        mask: rle_decode(&i.rle, rec.height, rec.width)?,
                        class_id: i.class_id,
                        polygon: i.polygon,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tiles.push(AnnotatedTile {
                tile_id: rec.tile_id,
                image,
                instances,
                provenance: Provenance { seed: rec.seed, config_hash: rec.config_hash },
            });
        }
        if tiles.len() != header.tile_count {
            return Err(bad(0, format!("header lists {} tiles, found {}", header.tile_count, tiles.len())));
        }
        Ok(Dataset { root: dir.to_path_buf(), header, tiles })
    }

    pub fn split(&self) -> Result<DatasetSplit> {
        let text = fs::read_to_string(self.root.join(SPLIT_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Tiles whose ids are in `ids`, in `ids` order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<AnnotatedTile>> {
        let missing: Vec<String> =
            ids.iter().filter(|id| !self.tiles.iter().any(|t| &t.tile_id == *id)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::UnknownTiles(missing));
        }
        Ok(ids.iter().map(|id| self.tiles.iter().find(|t| &t.tile_id == id).unwrap().clone()).collect())
    }

    pub fn max_instances(&self) -> usize {
        self.tiles.iter().map(|t| t.instances.len()).max().unwrap_or(0)
    }
}

/// Hex SHA-256 of the manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(dir.join(MANIFEST_FILE))?)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then a 70/15/15 cut. Validation and test get
/// `round(0.15 n)` tiles each, at least one.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::config(format!("need at least 3 tiles to split, got {n}")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * 0.15).round() as usize).max(1);
    let n_train = n - 2 * held;
    let test = shuffled.split_off(n_train + held);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test })
}
