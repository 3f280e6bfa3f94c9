//! Whole-model configuration, initialization, forward pass and persistence.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::decoder::{self, DecoderConfig, DecoderOutput, ScoredMask};
use crate::diffcore::{checkpoint, Graph, NodeId, ParamSet, Real, Tensor};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Small configuration used by tests and the overfit experiment.
    pub fn desk(n_instances: usize) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.decoder.n_instances = n_instances;
        cfg
    }
}

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    backbone::init_params_into(&cfg.backbone, &mut params, &mut rng)?;
    encoder::init_params_into(&cfg.encoder, cfg.backbone.out_channels(), &mut params, &mut rng)?;
    decoder::init_params_into(&cfg.decoder, cfg.encoder.fused_channels, &mut params, &mut rng)?;
    Ok(params)
}

/// Forward pass for one padded `[1, 3, H, W]` image node.
pub fn forward<T: Real>(g: &mut Graph<T>, image: NodeId, cfg: &ModelConfig, params: &ParamSet<T>) -> Result<DecoderOutput> {
    if g.shape(image).first() != Some(&1) {
        return Err(Error::shape(format!("model forward takes one image, got {:?}", g.shape(image))));
    }
    let pyramid = backbone::extract_features(g, image, &cfg.backbone, params)?;
    let fused = encoder::fuse(g, &pyramid, &cfg.encoder, params)?;
    decoder::decode(g, fused, &cfg.decoder, params)
}

/// A configuration with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn infer(&self, image: &Tensor<T>, score_threshold: f64) -> Result<Vec<ScoredMask>> {
        decoder::infer(image, &self.params, &self.config, score_threshold)
    }

    /// Writes `path` (tensors) and `path.json` (configuration).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.params)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`]. Extra tensors (such as
    /// optimizer state) are ignored; missing ones are an error.
    pub fn load(path: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        let mut params = init_params::<T>(&config, 0)?;
        let stored = checkpoint::load_params::<T>(path)?;
        for (name, p) in params.iter_mut() {
            let src = stored
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
            if src.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(src.data());
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk(8);
        cfg.decoder.instance_branch_channels = 16;
        cfg.decoder.mask_branch_channels = 16;
        cfg.decoder.kernel_dim = 8;
        cfg.encoder.fused_channels = 16;
        cfg
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 32, 48], 0.5));
        let out = forward(&mut g, x, &cfg, &params).unwrap();
        assert_eq!(g.shape(out.mask_logits), &[8, 8, 12]);
        assert_eq!(g.shape(out.iams), &[8, 96]);
        assert_eq!(g.shape(out.class_logits), &[8, 1]);
        assert_eq!(out.grid, (8, 12));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((a, x), (b, y)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn threshold_extremes() {
        let m = Model::<f32>::new(tiny(), 4).unwrap();
        let img = Tensor::full(&[3, 20, 20], 0.3);
        assert!(m.infer(&img, 1.0).unwrap().is_empty());
        let all = m.infer(&img, 0.0).unwrap();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|s| s.mask.extent() == (20, 20)));
    }
}
