//! Python bindings: dataset generation and loading, model training and
//! inference, matching, mask codec, evaluation and FPS measurement.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use sparseseg_core::bench;
use sparseseg_core::datagen::{self, DatasetConfig, SceneConfig};
use sparseseg_core::diffcore::Tensor;
use sparseseg_core::error::Error;
use sparseseg_core::evaluator::{self, EvalConfig};
use sparseseg_core::mask::BinaryMask;
use sparseseg_core::matching::{self, CostMatrix, RunDir, TrainConfig};
use sparseseg_core::model::{Model as CoreModel, ModelConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `[3, H, W]` float image from interleaved RGB bytes.
fn image_from_rgb(rgb: &[u8], height: usize, width: usize) -> PyResult<Tensor<f32>> {
    if rgb.len() != height * width * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} RGB bytes for a {height}x{width} image, got {}",
            height * width * 3,
            rgb.len()
        )));
    }
    let hw = height * width;
    Ok(Tensor::from_fn(&[3, height, width], |i| rgb[(i % hw) * 3 + i / hw] as f32 / 255.0))
}

fn mask_from_bytes(bits: &[u8], height: usize, width: usize) -> PyResult<BinaryMask> {
    BinaryMask::new(height, width, bits.iter().map(|&b| b != 0).collect()).map_err(to_py)
}

/// One predicted instance.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Instance {
    score: f64,
    class_id: usize,
    height: usize,
    width: usize,
    /// Row-major run-length encoding, starting with a background run.
    rle: String,
}

#[pymethods]
impl Instance {
    /// Mask as row-major bytes (0 or 1).
    fn mask<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let m = datagen::rle_decode(&self.rle, self.height, self.width).map_err(to_py)?;
        let bytes: Vec<u8> = m.bits().iter().map(|&b| b as u8).collect();
        Ok(PyBytes::new(py, &bytes))
    }

    fn area(&self) -> PyResult<usize> {
        Ok(datagen::rle_decode(&self.rle, self.height, self.width).map_err(to_py)?.area())
    }

    fn __repr__(&self) -> String {
        format!("Instance(score={:.4}, class_id={}, {}x{})", self.score, self.class_id, self.height, self.width)
    }
}

fn instance_of(score: f64, class_id: usize, mask: &BinaryMask) -> Instance {
    Instance { score, class_id, height: mask.height(), width: mask.width(), rle: datagen::rle_encode(mask) }
}

/// A segmentation model (single precision).
#[pyclass]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    /// Fresh model with `n_instances` slots; weights drawn from `seed`.
    #[new]
    #[pyo3(signature = (n_instances = 500, seed = 0, config_json = None))]
    fn new(n_instances: usize, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut cfg: ModelConfig = match config_json {
            Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        cfg.decoder.n_instances = n_instances;
        Ok(Model { inner: CoreModel::new(cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: CoreModel::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn n_instances(&self) -> usize {
        self.inner.config.decoder.n_instances
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.config)
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Instances scoring at least `score_threshold` on an RGB image given
    /// as interleaved bytes.
    #[pyo3(signature = (rgb, height, width, score_threshold = 0.3))]
    fn predict(&self, py: Python<'_>, rgb: &[u8], height: usize, width: usize, score_threshold: f64) -> PyResult<Vec<Instance>> {
        let img = image_from_rgb(rgb, height, width)?;
        let out = py.detach(|| self.inner.infer(&img, score_threshold)).map_err(to_py)?;
        Ok(out.iter().map(|s| instance_of(s.score, s.class_id, &s.mask)).collect())
    }

    /// Trains on the training split of the dataset at `dataset_dir`. With
    /// `run_dir` set, checkpoints and the loss curve go there. Returns the
    /// per-iteration total loss.
    #[pyo3(signature = (dataset_dir, iterations = 100, lr = 0.01, batch_size = 4, seed = 0, run_dir = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset_dir: PathBuf,
        iterations: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        run_dir: Option<PathBuf>,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig { iterations, lr, batch_size, seed, ..TrainConfig::default() };
        let model = &mut self.inner;
        py.detach(|| {
            let ds = datagen::Dataset::load(&dataset_dir)?;
            let tiles = ds.subset(&ds.split()?.train)?;
            let run = run_dir.map_or_else(RunDir::none, |d| RunDir::at(d, false));
            let curve = matching::fit(&tiles, model, &cfg, &run, |_| {})?;
            Ok(curve.iter().map(|r| r.loss.total).collect())
        })
        .map_err(to_py)
    }

    /// AP report (as a dict) on one split of a dataset.
    #[pyo3(signature = (dataset_dir, split = "test", iou_threshold = 0.5, score_threshold = 0.05))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset_dir: PathBuf,
        split: &str,
        iou_threshold: f64,
        score_threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let tiles = split_tiles(&dataset_dir, split)?;
        let model = &self.inner;
        let report = py
            .detach(|| {
                let preds = bench::predict_tiles(model, &tiles, score_threshold)?;
                let cfg = EvalConfig { iou_threshold, num_classes: model.config.decoder.num_classes };
                evaluator::evaluate(&preds, &tiles, &cfg)
            })
            .map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Single-stream FPS on one split of a dataset (dict result).
    #[pyo3(signature = (dataset_dir, split = "test", warmup = 3, reps = 20, score_threshold = 0.05))]
    fn measure_fps<'py>(
        &self,
        py: Python<'py>,
        dataset_dir: PathBuf,
        split: &str,
        warmup: usize,
        reps: usize,
        score_threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let images: Vec<_> = split_tiles(&dataset_dir, split)?.into_iter().map(|t| t.image).collect();
        let model = &self.inner;
        let r = py.detach(|| bench::measure_fps(model, &images, warmup, reps, score_threshold)).map_err(to_py)?;
        json_to_py(py, &r)
    }
}

fn split_tiles(dir: &std::path::Path, split: &str) -> PyResult<Vec<datagen::AnnotatedTile>> {
    let ds = datagen::Dataset::load(dir).map_err(to_py)?;
    if split == "all" {
        return Ok(ds.tiles);
    }
    let s = ds.split().map_err(to_py)?;
    let ids = match split {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    };
    ds.subset(&ids).map_err(to_py)
}

/// Writes a synthetic dataset; returns `(tile_count, instance_count)`.
#[pyfunction]
#[pyo3(signature = (out_dir, n_tiles = 64, seed = 0, tile_extent = 226, parallel = true))]
fn generate_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    n_tiles: usize,
    seed: u64,
    tile_extent: usize,
    parallel: bool,
) -> PyResult<(usize, usize)> {
    let cfg = DatasetConfig { n_tiles, master_seed: seed, scene: SceneConfig { tile_extent, ..SceneConfig::default() } };
    py.detach(|| {
        let tiles = datagen::generate_dataset(&cfg, parallel)?;
        datagen::write_dataset(&out_dir, &cfg, &tiles)?;
        Ok((tiles.len(), tiles.iter().map(|t| t.instances.len()).sum()))
    })
    .map_err(to_py)
}

/// `(tile_id, instance_count)` for every tile of a dataset on disk.
#[pyfunction]
fn dataset_summary(dataset_dir: PathBuf) -> PyResult<Vec<(String, usize)>> {
    let ds = datagen::Dataset::load(&dataset_dir).map_err(to_py)?;
    Ok(ds.tiles.iter().map(|t| (t.tile_id.clone(), t.instances.len())).collect())
}

/// Row-major run-length encoding of a 0/1 byte mask.
#[pyfunction]
fn rle_encode(bits: &[u8], height: usize, width: usize) -> PyResult<String> {
    Ok(datagen::rle_encode(&mask_from_bytes(bits, height, width)?))
}

#[pyfunction]
fn rle_decode<'py>(py: Python<'py>, rle: &str, height: usize, width: usize) -> PyResult<Bound<'py, PyBytes>> {
    let m = datagen::rle_decode(rle, height, width).map_err(to_py)?;
    let bytes: Vec<u8> = m.bits().iter().map(|&b| b as u8).collect();
    Ok(PyBytes::new(py, &bytes))
}

/// Minimum-cost assignment of columns to rows (rows >= columns). Returns
/// `(pairs, total_cost)` with pairs `(row, col)` sorted by column.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("cost matrix rows differ in length"));
    }
    let m = CostMatrix::new(rows, cols, cost.concat()).map_err(to_py)?;
    let a = matching::hungarian(&m).map_err(to_py)?;
    Ok((a.pairs, a.total_cost))
}

/// IoU of two 0/1 byte masks of the same extent.
#[pyfunction]
fn mask_iou(a: &[u8], b: &[u8], height: usize, width: usize) -> PyResult<f64> {
    evaluator::mask_iou(&mask_from_bytes(a, height, width)?, &mask_from_bytes(b, height, width)?).map_err(to_py)
}

#[pymodule]
fn sparseseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Instance>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_summary, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add("REAL_TIME_FPS", bench::REAL_TIME_FPS)?;
    Ok(())
}
