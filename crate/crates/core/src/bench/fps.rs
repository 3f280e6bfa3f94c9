//! Single-stream throughput measurement.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::ScoredMask;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

/// Frames per second at or above which a result is labelled real-time.
pub const REAL_TIME_FPS: f64 = 30.0;
pub const FPS_REPORT_VERSION: &str = "# sparseseg fps-report v1";

/// Anything that turns an image into thresholded instances.
pub trait InferenceModel {
    fn infer(&self, image: &Tensor<f32>, score_threshold: f64) -> Result<Vec<ScoredMask>>;
}

impl InferenceModel for Model<f32> {
    fn infer(&self, image: &Tensor<f32>, score_threshold: f64) -> Result<Vec<ScoredMask>> {
        Model::infer(self, image, score_threshold)
    }
}

impl<M: InferenceModel + ?Sized> InferenceModel for &M {
    fn infer(&self, image: &Tensor<f32>, score_threshold: f64) -> Result<Vec<ScoredMask>> {
        (**self).infer(image, score_threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsResult {
    pub images_processed: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub latency_p50_ms: f64,
    pub latency_p90_ms: f64,
    pub latency_p99_ms: f64,
    pub warmup_count: usize,
    pub real_time: bool,
}

impl FpsResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FPS_REPORT_VERSION}");
        let _ = writeln!(s, "images_processed={}", self.images_processed);
        let _ = writeln!(s, "wall_seconds={:.6}", self.wall_seconds);
        let _ = writeln!(s, "fps={:.3}", self.fps);
        let _ = writeln!(s, "latency_p50_ms={:.3}", self.latency_p50_ms);
        let _ = writeln!(s, "latency_p90_ms={:.3}", self.latency_p90_ms);
        let _ = writeln!(s, "latency_p99_ms={:.3}", self.latency_p99_ms);
        let _ = writeln!(s, "warmup_count={}", self.warmup_count);
        let _ = writeln!(s, "real_time={}", self.real_time);
        s
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Runs `warmup` untimed passes over `images`, then `reps` timed passes.
/// Each call is timed individually; the wall clock spans all timed calls.
pub fn measure_fps<M: InferenceModel + ?Sized>(
    model: &M,
    images: &[Tensor<f32>],
    warmup: usize,
    reps: usize,
    score_threshold: f64,
) -> Result<FpsResult> {
    if images.is_empty() {
        return Err(Error::Empty("benchmark image set is empty".into()));
    }
    if warmup == 0 || reps == 0 {
        return Err(Error::config("warmup and reps must both be at least 1"));
    }
    for _ in 0..warmup {
        for img in images {
            std::hint::black_box(model.infer(img, score_threshold)?);
        }
    }
    let mut latencies = Vec::with_capacity(reps * images.len());
    let mut wall = 0.0;
    for _ in 0..reps {
        for img in images {
            let t = Instant::now();
            let out = model.infer(img, score_threshold)?;
            let dt = t.elapsed().as_secs_f64();
            std::hint::black_box(out);
            wall += dt;
            latencies.push(dt * 1e3);
        }
    }
    latencies.sort_by(f64::total_cmp);
    let n = latencies.len();
    let fps = n as f64 / wall;
    Ok(FpsResult {
        images_processed: n,
        wall_seconds: wall,
        fps,
        latency_p50_ms: percentile(&latencies, 50.0),
        latency_p90_ms: percentile(&latencies, 90.0),
        latency_p99_ms: percentile(&latencies, 99.0),
        warmup_count: warmup * images.len(),
        real_time: fps >= REAL_TIME_FPS,
    })
}
