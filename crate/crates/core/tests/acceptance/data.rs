use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg_core::datagen::{
    generate_dataset, rle_decode, rle_encode, stitch, tile_raster, write_dataset, Dataset, DatasetConfig, Extent,
    SceneConfig, MANIFEST_FILE,
};
use sparseseg_core::diffcore::Tensor;
use sparseseg_core::mask::BinaryMask;

const RLE_TRIALS: usize = 1000;
const TILING_TRIALS: usize = 200;
const FULL_SCALE_TILES: usize = 867;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..RLE_TRIALS {
        let (h, w) = (rng.gen_range(1..=40), rng.gen_range(1..=40));
        let density = match trial % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        };
        let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density));
        let back = rle_decode(&rle_encode(&m), h, w).unwrap();
        assert_eq!(back, m, "RLE trial {trial}");
    }

    for trial in 0..TILING_TRIALS {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=70), rng.gen_range(1..=70));
        let tile = rng.gen_range(2..=32);
        let overlap = rng.gen_range(0..tile);
        let raster = Tensor::<f32>::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0));
        let tiles = tile_raster(&raster, tile, overlap).unwrap();
        let back = stitch(&tiles, c, Extent { height: h, width: w }).unwrap();
        assert_eq!(back.data(), raster.data(), "tiling trial {trial}: {h}x{w} tile {tile} overlap {overlap}");
    }

    let tmp = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { n_tiles: 24, master_seed: 21, scene: SceneConfig::default() };
    let serial = generate_dataset(&cfg, false).unwrap();
    let parallel = generate_dataset(&cfg, true).unwrap();
    write_dataset(&tmp.path().join("serial"), &cfg, &serial).unwrap();
    write_dataset(&tmp.path().join("parallel"), &cfg, &parallel).unwrap();
    let a = files(&tmp.path().join("serial"));
    assert_eq!(a.len(), 24 + 2);
    assert_eq!(a, files(&tmp.path().join("parallel")), "serial and parallel datasets differ");

    let big = DatasetConfig { n_tiles: FULL_SCALE_TILES, master_seed: 867, scene: SceneConfig::default() };
    let tiles = generate_dataset(&big, true).unwrap();
    let dir = tmp.path().join("full");
    write_dataset(&dir, &big, &tiles).unwrap();
    let ds = Dataset::load(&dir).unwrap();
    let instances: usize = tiles.iter().map(|t| t.instances.len()).sum();
    assert_eq!(ds.header.tile_count, FULL_SCALE_TILES);
    assert_eq!(ds.tiles.len(), FULL_SCALE_TILES);
    assert_eq!(ds.header.instance_count, instances);
    assert_eq!(ds.tiles.iter().map(|t| t.instances.len()).sum::<usize>(), instances);
    let split = ds.split().unwrap();
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), FULL_SCALE_TILES);
    assert!(dir.join(MANIFEST_FILE).exists());
    format!(
        "{RLE_TRIALS} RLE and {TILING_TRIALS} tile/stitch round trips exact; serial = parallel over {} files; {FULL_SCALE_TILES}-tile set with {instances} instances reloads with matching counts",
        a.len()
    )
}
