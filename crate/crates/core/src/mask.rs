use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn same_extent(&self, other: &BinaryMask) -> Result<()> {
        if self.extent() != other.extent() {
            return Err(Error::shape(format!(
                "mask extents differ: {:?} vs {:?}",
                self.extent(),
                other.extent()
            )));
        }
        Ok(())
    }

    /// Crops to the top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height.min(self.height), width.min(self.width), |y, x| self.get(y, x))
    }

    /// Downsamples by an integer factor: a cell is set when at least half of
    /// its source pixels are set. Extents must be multiples of `factor`.
    pub fn downsample_majority(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "{}x{} mask not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(BinaryMask::from_fn(h, w, |y, x| {
            let mut count = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    count += usize::from(self.get(y * factor + dy, x * factor + dx));
                }
            }
            2 * count >= factor * factor
        }))
    }
}
