use std::fs;

use sparseseg_core::bench::{parse_tradeoff_csv, sweep, SweepConfig, TRADEOFF_CSV, TRADEOFF_SVG};
use sparseseg_core::datagen::{generate_dataset, split_dataset, DatasetConfig, SceneConfig};
use sparseseg_core::matching::TrainConfig;
use sparseseg_core::model::ModelConfig;

const N_VALUES: [usize; 3] = [100, 300, 500];
const TILES: usize = 64;
const WARMUP: usize = 3;
const REPS: usize = 20;
const TRAIN_ITERATIONS: usize = 10;

pub fn run() -> String {
    let data = DatasetConfig {
        n_tiles: TILES,
        master_seed: 5,
        scene: SceneConfig { tile_extent: 64, polygon_count: [4, 10], ..SceneConfig::default() },
    };
    let tiles = generate_dataset(&data, true).unwrap();
    let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
    let split = split_dataset(&ids, data.master_seed).unwrap();
    let pick = |ids: &[String]| tiles.iter().filter(|t| ids.contains(&t.tile_id)).cloned().collect::<Vec<_>>();
    let (train_tiles, test_tiles) = (pick(&split.train), pick(&split.test));

    let cfg = SweepConfig { n_values: N_VALUES.to_vec(), warmup: WARMUP, reps: REPS, ..SweepConfig::default() };
    let train = TrainConfig { iterations: TRAIN_ITERATIONS, ..TrainConfig::default() };
    let tmp = tempfile::tempdir().unwrap();
    let outcome =
        sweep(&ModelConfig::default(), &train_tiles, &test_tiles, &train, &cfg, Some(tmp.path()), |_, _| {}).unwrap();

    let recs = parse_tradeoff_csv(&fs::read_to_string(tmp.path().join(TRADEOFF_CSV)).unwrap()).unwrap();
    assert_eq!(recs.len(), 3, "curve CSV records");
    assert_eq!(recs.iter().map(|r| r.n_instances).collect::<Vec<_>>(), N_VALUES);
    let svg = fs::read_to_string(tmp.path().join(TRADEOFF_SVG)).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let points: Vec<(usize, f64)> = doc
        .descendants()
        .filter_map(|n| Some((n.attribute("data-n")?.parse().ok()?, n.attribute("data-fps")?.parse().ok()?)))
        .collect();
    assert_eq!(points.len(), 3, "curve SVG records");

    for r in &outcome.records {
        assert_eq!(r.images_processed, REPS * test_tiles.len());
    }
    let fps: Vec<f64> = outcome.records.iter().map(|r| r.fps).collect();
    for w in fps.windows(2) {
        assert!(w[1] <= w[0], "FPS rises with N: {fps:?}");
    }
    let ap50: Vec<String> = outcome.records.iter().map(|r| format!("{:.3}", r.ap50)).collect();
    format!(
        "FPS {:?} for N {N_VALUES:?} (non-increasing; AP50 {ap50:?}, not asserted); CSV and SVG each hold 3 records",
        fps.iter().map(|f| (f * 10.0).round() / 10.0).collect::<Vec<_>>()
    )
}
