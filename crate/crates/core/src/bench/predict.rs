//! Whole-raster prediction: tile, infer, stitch, overlay.

use crate::datagen::{tile_raster, AnnotatedTile, Extent};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::evaluator::PredictedInstance;
use crate::mask::BinaryMask;

use super::InferenceModel;

/// Runs `model` on every tile and tags results with the tile id.
pub fn predict_tiles<M: InferenceModel + ?Sized>(
    model: &M,
    tiles: &[AnnotatedTile],
    score_threshold: f64,
) -> Result<Vec<PredictedInstance>> {
    let mut out = Vec::new();
    for t in tiles {
        for s in model.infer(&t.image, score_threshold)? {
            out.push(PredictedInstance { tile_id: t.tile_id.clone(), score: s.score, class_id: s.class_id, mask: s.mask });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterPrediction {
    pub extent: Extent,
    /// Instances in raster coordinates, each owning a disjoint pixel set.
    pub instances: Vec<PredictedInstance>,
}

type Candidate = (f64, usize, Vec<(usize, usize)>);

/// Predicts on a `[3, H, W]` raster of any size. Windows of `tile` pixels
/// overlap by `overlap`; where window results overlap, each pixel goes to
/// the highest-scoring instance covering it. Instances left with no pixels
/// are dropped.
pub fn predict_raster<M: InferenceModel + ?Sized>(
    model: &M,
    raster: &Tensor<f32>,
    raster_id: &str,
    tile: usize,
    overlap: usize,
    score_threshold: f64,
) -> Result<RasterPrediction> {
    let (h, w) = match *raster.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("raster must be [3, H, W], got {s:?}"))),
    };
    // (score, class, raster pixels) per detection.
    let mut candidates: Vec<Candidate> = Vec::new();
    for win in tile_raster(raster, tile, overlap)? {
        for s in model.infer(&win.data, score_threshold)? {
            let mut pix = Vec::new();
            for y in 0..win.valid.height {
                for x in 0..win.valid.width {
                    if s.mask.get(y, x) {
                        pix.push((win.y + y, win.x + x));
                    }
                }
            }
            if !pix.is_empty() {
                candidates.push((s.score, s.class_id, pix));
            }
        }
    }
    // owner[p] = candidate index with the best score; ties go to the earlier one
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (k, (score, _, pix)) in candidates.iter().enumerate() {
        for &(y, x) in pix {
            let o = &mut owner[y * w + x];
            if o.is_none_or(|j| candidates[j].0 < *score) {
                *o = Some(k);
            }
        }
    }
    let mut masks: Vec<Option<BinaryMask>> = vec![None; candidates.len()];
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            masks[k].get_or_insert_with(|| BinaryMask::empty(h, w)).set(p / w, p % w, true);
        }
    }
    let instances = candidates
        .iter()
        .zip(masks)
        .filter_map(|((score, class_id, _), m)| {
            m.map(|mask| PredictedInstance { tile_id: raster_id.to_string(), score: *score, class_id: *class_id, mask })
        })
        .collect();
    Ok(RasterPrediction { extent: Extent { height: h, width: w }, instances })
}

/// Distinct, saturated colour for instance `i` (golden-angle hue walk).
pub fn instance_color(i: usize) -> [u8; 3] {
    let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Interleaved RGB bytes of `raster` with each instance blended in its colour.
pub fn overlay_rgb(raster: &Tensor<f32>, instances: &[PredictedInstance], alpha: f32) -> Result<Vec<u8>> {
    let (h, w) = match *raster.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("raster must be [3, H, W], got {s:?}"))),
    };
    let d = raster.data();
    let mut out = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            out[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    for (i, inst) in instances.iter().enumerate() {
        if inst.mask.extent() != (h, w) {
            return Err(Error::shape(format!("instance {i} mask does not match the {h}x{w} raster")));
        }
        let col = instance_color(i);
        for (p, &on) in inst.mask.bits().iter().enumerate() {
            if on {
                for c in 0..3 {
                    let v = out[p * 3 + c] as f32 * (1.0 - alpha) + col[c] as f32 * alpha;
                    out[p * 3 + c] = v.round() as u8;
                }
            }
        }
    }
    Ok(out)
}
