//! Scaled-down residual feature extractor.
//!
//! Stem (3x3 conv, stride 2, then 2x2 max pool) brings the input to 1/4
//! resolution; three stages of basic residual blocks follow, the second and
//! third opening with a stride-2 block. Stage outputs form the pyramid at
//! 1/4, 1/8 and 1/16 of the padded input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamSet, PoolKind, Real};
use crate::error::{Error, Result};
use crate::layers;

pub const GRID: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: [usize; 3],
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stem_channels: 16, stage_channels: [16, 32, 64], blocks_per_stage: [2, 2, 2], norm_groups: 8 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage_channels;
        if !(s[0] < s[1] && s[1] < s[2]) {
            return Err(Error::config(format!("stage_channels {s:?} must be strictly increasing")));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("norm_groups must be positive"));
        }
        for c in std::iter::once(self.stem_channels).chain(s) {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::config(format!(
                    "{c} channels not divisible into {} normalization groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> [usize; 3] {
        self.stage_channels
    }
}

/// Stage outputs at 1/4, 1/8 and 1/16 resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub p3: NodeId,
    pub p4: NodeId,
    pub p5: NodeId,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [NodeId; 3] {
        [self.p3, self.p4, self.p5]
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("backbone.stage{}.block{}", stage + 1, block)
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

/// Adds backbone parameters to `params`, drawing from `rng` in a fixed order.
pub fn init_params_into<T: Real>(cfg: &BackboneConfig, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    layers::init_conv(params, "backbone.stem.conv", cfg.stem_channels, 3, 3, rng);
    layers::init_norm(params, "backbone.stem.norm", cfg.stem_channels);
    let mut in_ch = cfg.stem_channels;
    for stage in 0..3 {
        let out_ch = cfg.stage_channels[stage];
        for block in 0..cfg.blocks_per_stage[stage] {
            let name = block_name(stage, block);
            layers::init_conv(params, &format!("{name}.conv1"), out_ch, in_ch, 3, rng);
            layers::init_norm(params, &format!("{name}.norm1"), out_ch);
            layers::init_conv(params, &format!("{name}.conv2"), out_ch, out_ch, 3, rng);
            layers::init_norm(params, &format!("{name}.norm2"), out_ch);
            if block_stride(stage, block) != 1 || in_ch != out_ch {
                layers::init_conv(params, &format!("{name}.proj"), out_ch, in_ch, 1, rng);
                layers::init_norm(params, &format!("{name}.proj_norm"), out_ch);
            }
            in_ch = out_ch;
        }
    }
    Ok(())
}

pub fn init_params<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    init_params_into(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(params)
}

fn residual_block<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    name: &str,
    x: NodeId,
    stride: usize,
    groups: usize,
) -> Result<NodeId> {
    let h = layers::conv(g, params, &format!("{name}.conv1"), x, stride)?;
    let h = layers::norm(g, params, &format!("{name}.norm1"), h, groups)?;
    let h = g.relu(h);
    let h = layers::conv(g, params, &format!("{name}.conv2"), h, 1)?;
    let h = layers::norm(g, params, &format!("{name}.norm2"), h, groups)?;
    let shortcut = if params.contains(&format!("{name}.proj.weight")) {
        let s = layers::conv(g, params, &format!("{name}.proj"), x, stride)?;
        layers::norm(g, params, &format!("{name}.proj_norm"), s, groups)?
    } else {
        x
    };
    let sum = g.add(h, shortcut)?;
    Ok(g.relu(sum))
}

/// Runs the extractor on an `[N, 3, H, W]` image node.
pub fn extract_features<T: Real>(
    g: &mut Graph<T>,
    image: NodeId,
    cfg: &BackboneConfig,
    params: &ParamSet<T>,
) -> Result<FeaturePyramid> {
    let s = g.shape(image).to_vec();
    match s.as_slice() {
        [_, 3, h, w] if h % GRID == 0 && w % GRID == 0 && *h > 0 && *w > 0 => {}
        [_, 3, h, w] => {
            return Err(Error::Contract(format!(
                "image extent {h}x{w} is not a positive multiple of {GRID}; pad it first"
            )))
        }
        _ => return Err(Error::shape(format!("backbone expects [N, 3, H, W], got {s:?}"))),
    }
    let groups = cfg.norm_groups;
    let x = layers::conv(g, params, "backbone.stem.conv", image, 2)?;
    let x = layers::norm(g, params, "backbone.stem.norm", x, groups)?;
    let x = g.relu(x);
    let (h, w) = layers::hw(g, x);
    let mut x = g.pool2d(PoolKind::Max, x, (h / 2, w / 2))?;
    let mut outs = Vec::with_capacity(3);
    for stage in 0..3 {
        for block in 0..cfg.blocks_per_stage[stage] {
            x = residual_block(g, params, &block_name(stage, block), x, block_stride(stage, block), groups)?;
        }
        outs.push(x);
    }
    Ok(FeaturePyramid { p3: outs[0], p4: outs[1], p5: outs[2] })
}
