use std::time::Duration;

use sparseseg_core::bench::{measure_fps, InferenceModel};
use sparseseg_core::decoder::ScoredMask;
use sparseseg_core::diffcore::Tensor;
use sparseseg_core::Result;

const SLEEP: Duration = Duration::from_millis(10);
const EXPECTED_FPS: f64 = 100.0;
const REL_TOL: f64 = 0.10;
const WARMUP: usize = 3;
const REPS: usize = 20;

struct Sleeper;

impl InferenceModel for Sleeper {
    fn infer(&self, _: &Tensor<f32>, _: f64) -> Result<Vec<ScoredMask>> {
        std::thread::sleep(SLEEP);
        Ok(Vec::new())
    }
}

pub fn run() -> String {
    let images = vec![Tensor::zeros(&[3, 8, 8]); 5];
    let r = measure_fps(&Sleeper, &images, WARMUP, REPS, 0.3).unwrap();
    assert_eq!(r.images_processed, REPS * images.len());
    assert_eq!(r.warmup_count, WARMUP * images.len());
    let rel = (r.fps - EXPECTED_FPS).abs() / EXPECTED_FPS;
    assert!(rel <= REL_TOL, "measured {:.2} fps, {:.1}% off {EXPECTED_FPS}", r.fps, rel * 100.0);
    format!("{:.2} fps over {} timed calls ({:.2}% from {EXPECTED_FPS}, tolerance {:.0}%)", r.fps, r.images_processed, rel * 100.0, REL_TOL * 100.0)
}
