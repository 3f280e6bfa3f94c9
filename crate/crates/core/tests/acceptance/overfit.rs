use sparseseg_core::bench::predict_tiles;
use sparseseg_core::datagen::{generate_dataset, DatasetConfig, SceneConfig};
use sparseseg_core::evaluator::{evaluate, EvalConfig};
use sparseseg_core::matching::{fit, RunDir, TrainConfig};
use sparseseg_core::model::{Model, ModelConfig};

const N_INSTANCES: usize = 64;
const TILES: usize = 4;
const ITERATIONS: usize = 600;
const MAX_ITERATIONS: usize = 2000;
const _: () = assert!(ITERATIONS <= MAX_ITERATIONS);
const MIN_AP50: f64 = 0.9;
const SCORE_THRESHOLD: f64 = 0.05;
/// Prefix of the run that is repeated to check determinism.
const REPEAT_ITERATIONS: usize = 30;
const SEED: u64 = 0;

pub fn run() -> String {
    let data = DatasetConfig {
        n_tiles: TILES,
        master_seed: 7,
        scene: SceneConfig { tile_extent: 64, polygon_count: [4, 10], ..SceneConfig::default() },
    };
    let tiles = generate_dataset(&data, true).unwrap();
    let mcfg = ModelConfig::desk(N_INSTANCES);
    assert_eq!(mcfg.backbone.stage_channels, [16, 32, 64]);
    let train = TrainConfig { iterations: ITERATIONS, seed: SEED, ..TrainConfig::default() };

    let mut model = Model::<f32>::new(mcfg.clone(), SEED).unwrap();
    let curve = fit(&tiles, &mut model, &train, &RunDir::none(), |_| {}).unwrap();
    let preds = predict_tiles(&model, &tiles, SCORE_THRESHOLD).unwrap();
    let report = evaluate(&preds, &tiles, &EvalConfig::default()).unwrap();
    assert!(report.ap50 >= MIN_AP50, "AP50 {:.4} after {ITERATIONS} iterations", report.ap50);

    // same seed, same prefix: bit-identical losses and parameters
    let short = TrainConfig { iterations: REPEAT_ITERATIONS, ..train.clone() };
    let mut a = Model::<f32>::new(mcfg.clone(), SEED).unwrap();
    let mut b = Model::<f32>::new(mcfg, SEED).unwrap();
    let ca = fit(&tiles, &mut a, &short, &RunDir::none(), |_| {}).unwrap();
    let cb = fit(&tiles, &mut b, &short, &RunDir::none(), |_| {}).unwrap();
    assert_eq!(ca, cb, "repeated runs diverge");
    assert_eq!(ca[..], curve[..REPEAT_ITERATIONS], "short run differs from the long run's prefix");
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na} differs");
    }
    format!(
        "AP50 {:.3} (AP {:.3}) on {TILES} tiles after {ITERATIONS} iterations, final loss {:.4}; runs repeat bit-identically",
        report.ap50,
        report.ap,
        curve.last().unwrap().loss.total
    )
}
