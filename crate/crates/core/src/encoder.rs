//! Instance context encoder: fuses the three pyramid levels into one map at
//! 1/4 resolution.
//!
//! Lateral 1x1 projections bring every level to `fused_channels`. The deepest
//! level gets pyramid pooling, then a top-down pass adds each upsampled
//! coarser map into the next finer one. The three results are upsampled to
//! the finest grid, concatenated and projected back to `fused_channels`.
//! Every convolution here is 1x1, so spatially constant inputs stay constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::diffcore::{Graph, NodeId, ParamSet, PoolKind, Real};
use crate::error::{Error, Result};
use crate::layers;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub fused_channels: usize,
    pub ppm_bins: Vec<usize>,
    /// Pool the deepest level before the top-down pass (true) or only on its
    /// own output branch after it (false).
    pub ppm_first: bool,
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { fused_channels: 64, ppm_bins: vec![1, 2, 3, 6], ppm_first: true, norm_groups: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ppm_bins.is_empty() || self.ppm_bins.windows(2).any(|w| w[0] >= w[1]) || self.ppm_bins[0] == 0 {
            return Err(Error::config(format!("ppm_bins {:?} must be nonempty, positive and strictly increasing", self.ppm_bins)));
        }
        if self.fused_channels == 0 || self.norm_groups == 0 || !self.fused_channels.is_multiple_of(self.norm_groups) {
            return Err(Error::config(format!(
                "fused_channels {} not divisible into {} normalization groups",
                self.fused_channels, self.norm_groups
            )));
        }
        Ok(())
    }
}

pub const PPM_PREFIX: &str = "encoder.ppm";

pub fn init_params_into<T: Real>(
    cfg: &EncoderConfig,
    in_channels: [usize; 3],
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.fused_channels;
    for (level, &in_ch) in [3, 4, 5].iter().zip(&in_channels) {
        layers::init_conv(params, &format!("encoder.lateral{level}"), c, in_ch, 1, rng);
    }
    layers::init_conv(params, &format!("{PPM_PREFIX}.proj"), c, c, 1, rng);
    for &b in &cfg.ppm_bins {
        layers::init_conv(params, &format!("{PPM_PREFIX}.bin{b}"), c, c, 1, rng);
    }
    layers::init_conv(params, "encoder.fuse", c, 3 * c, 1, rng);
    layers::init_norm(params, "encoder.fuse_norm", c);
    Ok(())
}

pub fn init_params<T: Real>(cfg: &EncoderConfig, in_channels: [usize; 3], seed: u64) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    init_params_into(cfg, in_channels, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(params)
}

/// Pyramid pooling with parameters under [`PPM_PREFIX`]: the input projection
/// plus, per bin, adaptive-average to `bin x bin`, a 1x1 conv and bilinear
/// upsampling back. Bins larger than the input are clamped to its extent.
pub fn pyramid_pool<T: Real>(g: &mut Graph<T>, deepest: NodeId, bins: &[usize], params: &ParamSet<T>) -> Result<NodeId> {
    pyramid_pool_with(g, deepest, bins, params, PPM_PREFIX)
}

pub fn pyramid_pool_with<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    bins: &[usize],
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<NodeId> {
    let (h, w) = layers::hw(g, x);
    let mut acc = layers::conv(g, params, &format!("{prefix}.proj"), x, 1)?;
    for &b in bins {
        let pooled = g.pool2d(PoolKind::AdaptiveAvg, x, (b.min(h), b.min(w)))?;
        let ctx = layers::conv(g, params, &format!("{prefix}.bin{b}"), pooled, 1)?;
        let up = g.upsample_bilinear(ctx, (h, w))?;
        acc = g.add(acc, up)?;
    }
    Ok(acc)
}

fn check_pyramid<T: Real>(g: &Graph<T>, pyramid: &FeaturePyramid, params: &ParamSet<T>) -> Result<()> {
    let (h3, w3) = layers::hw(g, pyramid.p3);
    let (h4, w4) = layers::hw(g, pyramid.p4);
    let (h5, w5) = layers::hw(g, pyramid.p5);
    if (h4, w4) != (h3.div_ceil(2), w3.div_ceil(2)) || (h5, w5) != (h4.div_ceil(2), w4.div_ceil(2)) {
        return Err(Error::shape(format!(
            "pyramid extents {h3}x{w3}, {h4}x{w4}, {h5}x{w5} do not halve between levels"
        )));
    }
    for (level, id) in [(3, pyramid.p3), (4, pyramid.p4), (5, pyramid.p5)] {
        let name = format!("encoder.lateral{level}.weight");
        let expected = params.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?.shape()[1];
        let got = g.shape(id)[1];
        if got != expected {
            return Err(Error::shape(format!("pyramid level p{level} has {got} channels, lateral projection expects {expected}")));
        }
    }
    Ok(())
}

/// Fuses the pyramid into `[N, fused_channels, H/4, W/4]`.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    pyramid: &FeaturePyramid,
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
) -> Result<NodeId> {
    check_pyramid(g, pyramid, params)?;
    let lat3 = layers::conv(g, params, "encoder.lateral3", pyramid.p3, 1)?;
    let lat4 = layers::conv(g, params, "encoder.lateral4", pyramid.p4, 1)?;
    let lat5 = layers::conv(g, params, "encoder.lateral5", pyramid.p5, 1)?;
    let top = if cfg.ppm_first { pyramid_pool(g, lat5, &cfg.ppm_bins, params)? } else { lat5 };
    let size4 = layers::hw(g, lat4);
    let size3 = layers::hw(g, lat3);
    let up5 = g.upsample_bilinear(top, size4)?;
    let mid = g.add(lat4, up5)?;
    let up4 = g.upsample_bilinear(mid, size3)?;
    let fine = g.add(lat3, up4)?;
    let top_out = if cfg.ppm_first { top } else { pyramid_pool(g, top, &cfg.ppm_bins, params)? };

    let mid_full = g.upsample_bilinear(mid, size3)?;
    let top_full = g.upsample_bilinear(top_out, size3)?;
    let cat = g.concat(&[fine, mid_full, top_full], 1)?;
    let fused = layers::conv(g, params, "encoder.fuse", cat, 1)?;
    let fused = layers::norm(g, params, "encoder.fuse_norm", fused, cfg.norm_groups)?;
    Ok(g.relu(fused))
}
