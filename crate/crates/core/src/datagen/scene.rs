//! Synthetic polygonal-ground scenes.
//!
//! Seed points are scattered with a minimum spacing, every pixel is assigned
//! to its nearest seed, and pixels closer than half the trough width to a
//! cell boundary become background. Interiors are shaded by their relative
//! distance from the seed: bright rim and dark centre for low-centred cells,
//! the reverse for high-centred ones. Pixel arithmetic sticks to the basic
//! operations and square roots so output bytes do not depend on the
//! platform's transcendental functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MAX_POLYGONS: usize = 447;
pub const MIN_EXTENT: usize = 64;
pub const MAX_EXTENT: usize = 507;

pub const LOW_CENTERED: usize = 0;
pub const HIGH_CENTERED: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub tile_extent: usize,
    /// Inclusive polygon count range.
    pub polygon_count: [usize; 2],
    /// Fraction of cells rendered high-centred.
    pub high_centered_fraction: f64,
    pub trough_width: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            tile_extent: 226,
            polygon_count: [20, 60],
            high_centered_fraction: 0.5,
            trough_width: 3.0,
            noise_amplitude: 0.04,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_EXTENT..=MAX_EXTENT).contains(&self.tile_extent) {
            return Err(Error::config(format!(
                "tile_extent {} outside [{MIN_EXTENT}, {MAX_EXTENT}]",
                self.tile_extent
            )));
        }
        let [lo, hi] = self.polygon_count;
        if lo == 0 || lo > hi || hi > MAX_POLYGONS {
            return Err(Error::config(format!("polygon_count [{lo}, {hi}] must satisfy 1 <= min <= max <= {MAX_POLYGONS}")));
        }
        if !(0.0..=1.0).contains(&self.high_centered_fraction) {
            return Err(Error::config("high_centered_fraction must lie in [0, 1]"));
        }
        if !(self.trough_width >= 0.0 && self.trough_width.is_finite()) {
            return Err(Error::config("trough_width must be finite and nonnegative"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude <= 0.5) {
            return Err(Error::config("noise_amplitude must lie in [0, 0.5]"));
        }
        // Every cell needs room for a seed plus a trough on each side.
        let side = self.tile_extent as f64;
        let spacing = self.trough_width + 2.0;
        if (hi as f64) * spacing * spacing > side * side * 0.5 {
            return Err(Error::config(format!(
                "{hi} polygons with trough width {} do not fit a {side}px tile",
                self.trough_width
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration without its seed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: BinaryMask,
    /// [`LOW_CENTERED`] or [`HIGH_CENTERED`].
    pub class_id: usize,
    /// Voronoi cell outline in pixel coordinates, counter-clockwise.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct AnnotatedTile {
    pub tile_id: String,
    /// `[3, H, W]`, values `k / 255`.
    pub image: Tensor<f32>,
    pub instances: Vec<Instance>,
    pub provenance: Provenance,
}

impl AnnotatedTile {
    pub fn extent(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Interleaved RGB bytes of the image.
    pub fn rgb_bytes(&self) -> Vec<u8> {
        let (h, w) = self.extent();
        let d = self.image.data();
        let mut out = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + p] * 255.0).round() as u8);
            }
        }
        out
    }
}

/// Rejection sampling at `spacing`, relaxed towards `floor` when crowded.
fn place_seeds(n: usize, side: f64, spacing: f64, floor: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut spacing = spacing.max(floor);
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut misses = 0;
    while pts.len() < n {
        let p = [rng.gen_range(0.0..side), rng.gen_range(0.0..side)];
        let ok = pts.iter().all(|q| {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            dx * dx + dy * dy >= spacing * spacing
        });
        if ok {
            pts.push(p);
            misses = 0;
        } else {
            misses += 1;
            if misses > 2000 {
                spacing = (spacing * 0.9).max(floor);
                misses = 0;
            }
        }
    }
    pts
}

/// Clips the rectangle `[0, w] x [0, h]` to the Voronoi cell of `seeds[i]`.
fn voronoi_cell(seeds: &[[f64; 2]], i: usize, w: f64, h: f64) -> Vec<[f64; 2]> {
    let mut poly = vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    let s = seeds[i];
    for (j, t) in seeds.iter().enumerate() {
        if j == i || poly.is_empty() {
            continue;
        }
        // keep points p with (p - mid) . (t - s) <= 0
        let n = [t[0] - s[0], t[1] - s[1]];
        let mid = [(s[0] + t[0]) / 2.0, (s[1] + t[1]) / 2.0];
        let side = |p: &[f64; 2]| (p[0] - mid[0]) * n[0] + (p[1] - mid[1]) * n[1];
        let mut out = Vec::with_capacity(poly.len() + 1);
        for k in 0..poly.len() {
            let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
            let (fa, fb) = (side(&a), side(&b));
            if fa <= 0.0 {
                out.push(a);
            }
            if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
                let t = fa / (fa - fb);
                out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
            }
        }
        poly = out;
    }
    poly
}

/// Renders one tile from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, tile_id: impl Into<String>) -> Result<AnnotatedTile> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = rng.gen_range(cfg.polygon_count[0]..=cfg.polygon_count[1]);
    let side = cfg.tile_extent;
    let sidef = side as f64;
    let min_spacing = cfg.trough_width + 2.0;
    let natural = 0.6 * (sidef * sidef / n as f64).sqrt();
    let seeds = place_seeds(n, sidef, natural, min_spacing, &mut rng);
    let high: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.high_centered_fraction)).collect();

    let half_trough = cfg.trough_width / 2.0;
    let mut owner = vec![usize::MAX; side * side];
    let mut shade = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let d2: Vec<f64> = seeds
                .iter()
                .map(|s| (p[0] - s[0]) * (p[0] - s[0]) + (p[1] - s[1]) * (p[1] - s[1]))
                .collect();
            let mut best = 0;
            for (k, &d) in d2.iter().enumerate() {
                if d < d2[best] {
                    best = k;
                }
            }
            // distance from p to the nearest bisector of its cell
            let s1 = seeds[best];
            let mut boundary = f64::INFINITY;
            for (k, s) in seeds.iter().enumerate() {
                if k == best {
                    continue;
                }
                let sep = ((s[0] - s1[0]) * (s[0] - s1[0]) + (s[1] - s1[1]) * (s[1] - s1[1])).sqrt();
                boundary = boundary.min((d2[k] - d2[best]) / (2.0 * sep));
            }
            let idx = y * side + x;
            if boundary < half_trough {
                shade[idx] = 0.12;
                continue;
            }
            owner[idx] = best;
            let r1 = d2[best].sqrt();
            let rel = if boundary.is_finite() { r1 / (r1 + boundary) } else { r1 / sidef };
            shade[idx] = if high[best] { 0.72 - 0.32 * rel } else { 0.36 + 0.36 * rel };
        }
    }

    let offsets = [0.0, 0.025, -0.025];
    let mut data = vec![0.0f32; 3 * side * side];
    for (c, off) in offsets.iter().enumerate() {
        for (idx, &s) in shade.iter().enumerate() {
            let noise = if cfg.noise_amplitude > 0.0 {
                rng.gen_range(-cfg.noise_amplitude..cfg.noise_amplitude)
            } else {
                0.0
            };
            let v = (s + off + noise).clamp(0.0, 1.0);
            data[c * side * side + idx] = (v * 255.0).round() as f32 / 255.0;
        }
    }

    let instances = (0..n)
        .map(|k| Instance {
            mask: BinaryMask::from_fn(side, side, |y, x| owner[y * side + x] == k),
            class_id: if high[k] { HIGH_CENTERED } else { LOW_CENTERED },
            polygon: voronoi_cell(&seeds, k, sidef, sidef),
        })
        .collect();
    Ok(AnnotatedTile {
        tile_id: tile_id.into(),
        image: Tensor::new(vec![3, side, side], data)?,
        instances,
        provenance: Provenance { seed: cfg.seed, config_hash: cfg.hash() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig { tile_extent: 64, polygon_count: [5, 5], seed, ..SceneConfig::default() }
    }

    #[test]
    fn exact_count_and_determinism() {
        let a = generate_scene(&small(3), "a").unwrap();
        let b = generate_scene(&small(3), "a").unwrap();
        assert_eq!(a.instances.len(), 5);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.instances, b.instances);
        let c = generate_scene(&small(4), "a").unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn masks_disjoint_nonempty_and_off_troughs() {
        let t = generate_scene(&SceneConfig { seed: 9, ..SceneConfig::default() }, "t").unwrap();
        let (h, w) = t.extent();
        let mut count = vec![0u8; h * w];
        for inst in &t.instances {
            assert!(inst.mask.area() > 0);
            for (c, &b) in count.iter_mut().zip(inst.mask.bits()) {
                *c += u8::from(b);
            }
        }
        assert!(count.iter().all(|&c| c <= 1));
        // trough pixels are rendered at the trough shade (before noise)
        assert!(count.contains(&0));
    }

    #[test]
    fn polygons_contain_their_masks() {
        let t = generate_scene(&small(11), "t").unwrap();
        for inst in &t.instances {
            let poly = &inst.polygon;
            assert!(poly.len() >= 3);
            let inside = |px: f64, py: f64| {
                (0..poly.len()).all(|k| {
                    let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
                    let cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                    cross >= -1e-9
                })
            };
            for y in 0..64 {
                for x in 0..64 {
                    if inst.mask.get(y, x) {
                        assert!(inside(x as f64 + 0.5, y as f64 + 0.5));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SceneConfig { tile_extent: 63, ..SceneConfig::default() },
            SceneConfig { tile_extent: 508, ..SceneConfig::default() },
            SceneConfig { polygon_count: [5, 448], ..SceneConfig::default() },
            SceneConfig { polygon_count: [6, 5], ..SceneConfig::default() },
            SceneConfig { high_centered_fraction: 1.5, ..SceneConfig::default() },
            SceneConfig { tile_extent: 64, polygon_count: [400, 400], ..SceneConfig::default() },
        ];
        for cfg in bad {
            assert!(generate_scene(&cfg, "x").is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn hash_ignores_seed() {
        assert_eq!(small(1).hash(), small(2).hash());
        assert_ne!(small(1).hash(), SceneConfig::default().hash());
    }
}
