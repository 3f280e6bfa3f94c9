//! The TOML run configuration shared by all subcommands.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sparseseg_core::datagen::DatasetConfig;
use sparseseg_core::matching::TrainConfig;
use sparseseg_core::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub warmup: usize,
    pub reps: usize,
    pub score_threshold: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { warmup: 3, reps: 20, score_threshold: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    /// Which split to score: train, val, test or all.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { iou_threshold: 0.5, score_threshold: 0.05, split: "test".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub n_values: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { n_values: vec![100, 300, 500] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictSection {
    pub tile: usize,
    pub overlap: usize,
    pub score_threshold: f64,
    pub overlay_alpha: f32,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection { tile: 226, overlap: 32, score_threshold: 0.3, overlay_alpha: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub sweep: SweepSection,
    pub predict: PredictSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}
