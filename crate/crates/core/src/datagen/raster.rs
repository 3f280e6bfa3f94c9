//! Grid padding and overlapping tiling of `[C, H, W]` rasters.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// Extent of an image before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

fn chw<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Copies `src` into the top-left corner of a zero `[C, oh, ow]` tensor,
/// reading the window at `(y0, x0)`.
fn window<T: Real>(src: &Tensor<T>, y0: usize, x0: usize, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let vh = oh.min(h.saturating_sub(y0));
    let vw = ow.min(w.saturating_sub(x0));
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..vh {
            let s = ch * h * w + (y0 + y) * w + x0;
            let t = ch * oh * ow + y * ow;
            d[t..t + vw].copy_from_slice(&src.data()[s..s + vw]);
        }
    }
    out
}

/// Zero-pads bottom and right up to the next multiple of `multiple`.
pub fn pad_to_grid<T: Real>(image: &Tensor<T>, multiple: usize) -> (Tensor<T>, Extent) {
    let (_, h, w) = chw(image).expect("pad_to_grid takes a [C, H, W] tensor");
    let m = multiple.max(1);
    let (ph, pw) = (h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m);
    let extent = Extent { height: h, width: w };
    if (ph, pw) == (h, w) {
        return (image.detached(), extent);
    }
    (window(image, 0, 0, ph, pw), extent)
}

pub fn unpad<T: Real>(padded: &Tensor<T>, extent: Extent) -> Tensor<T> {
    window(padded, 0, 0, extent.height, extent.width)
}

/// One window of a tiled raster.
#[derive(Clone, Debug)]
pub struct PositionedTile<T: Real = f32> {
    pub y: usize,
    pub x: usize,
    /// `[C, tile, tile]`, zero-filled past the raster edge.
    pub data: Tensor<T>,
    /// Extent of the part inside the raster.
    pub valid: Extent,
    pub padded: bool,
}

fn starts(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out[out.len() - 1] + tile < extent {
        out.push(out[out.len() - 1] + stride);
    }
    out
}

/// Row-major windows of `tile x tile` with `overlap` shared pixels between
/// neighbours. A raster smaller than `tile` yields one padded window.
pub fn tile_raster<T: Real>(raster: &Tensor<T>, tile: usize, overlap: usize) -> Result<Vec<PositionedTile<T>>> {
    let (_, h, w) = chw(raster)?;
    if tile == 0 || overlap >= tile {
        return Err(Error::config(format!("tile {tile} must exceed overlap {overlap}")));
    }
    let stride = tile - overlap;
    let mut tiles = Vec::new();
    for &y in &starts(h, tile, stride) {
        for &x in &starts(w, tile, stride) {
            let valid = Extent { height: tile.min(h - y), width: tile.min(w - x) };
            tiles.push(PositionedTile {
                y,
                x,
                data: window(raster, y, x, tile, tile),
                padded: valid.height < tile || valid.width < tile,
                valid,
            });
        }
    }
    Ok(tiles)
}

/// Reassembles a `[C, H, W]` raster from tiles; overlapping pixels take the
/// value of the last tile written.
pub fn stitch<T: Real>(tiles: &[PositionedTile<T>], channels: usize, extent: Extent) -> Result<Tensor<T>> {
    let (h, w) = (extent.height, extent.width);
    let mut out = Tensor::zeros(&[channels, h, w]);
    for t in tiles {
        let (c, th, tw) = chw(&t.data)?;
        if c != channels || t.y + t.valid.height > h || t.x + t.valid.width > w {
            return Err(Error::shape(format!("tile at ({}, {}) does not fit a {h}x{w} raster", t.y, t.x)));
        }
        let d = out.data_mut();
        for ch in 0..c {
            for y in 0..t.valid.height {
                let s = ch * th * tw + y * tw;
                let o = ch * h * w + (t.y + y) * w + t.x;
                d[o..o + t.valid.width].copy_from_slice(&t.data.data()[s..s + t.valid.width]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut i = 0.0;
        Tensor::from_fn(&[c, h, w], |_| {
            i += 1.0;
            i
        })
    }

    #[test]
    fn padding_arithmetic() {
        let (p, e) = pad_to_grid(&ramp(3, 226, 226), 16);
        assert_eq!(p.shape(), &[3, 240, 240]);
        assert_eq!(e, Extent { height: 226, width: 226 });
        let (q, _) = pad_to_grid(&ramp(3, 224, 224), 16);
        assert_eq!(q.shape(), &[3, 224, 224]);
        let x = ramp(2, 17, 5);
        let (p, e) = pad_to_grid(&x, 16);
        assert_eq!(p.shape(), &[2, 32, 16]);
        assert_eq!(unpad(&p, e).data(), x.data());
    }

    #[test]
    fn tile_positions() {
        let t = tile_raster(&ramp(1, 512, 512), 256, 0).unwrap();
        let pos: Vec<_> = t.iter().map(|t| (t.y, t.x)).collect();
        assert_eq!(pos, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
        assert!(t.iter().all(|t| !t.padded));
        let t = tile_raster(&ramp(1, 3, 3), 2, 1).unwrap();
        assert_eq!(t.len(), 4);
        let t = tile_raster(&ramp(1, 5, 7), 16, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t[0].padded);
        assert!(tile_raster(&ramp(1, 5, 7), 4, 4).is_err());
    }

    #[test]
    fn stitch_round_trip() {
        let x = ramp(3, 37, 53);
        for (tile, overlap) in [(16, 0), (16, 5), (8, 7), (64, 3)] {
            let tiles = tile_raster(&x, tile, overlap).unwrap();
            let back = stitch(&tiles, 3, Extent { height: 37, width: 53 }).unwrap();
            assert_eq!(back.data(), x.data());
        }
    }
}
