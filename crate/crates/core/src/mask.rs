//! Binary segmentation masks and their run-length encoding.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense binary mask over an `height x width` image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: BitVec<u64, Lsb0>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: BitVec::repeat(false, height * width),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.bits.set(r * width + c, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits.set(row * self.width + col, value);
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.bits.count_ones()
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask dimensions {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok((self.bits.clone() & other.bits.as_bitslice()).count_ones())
    }

    pub fn union_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok((self.bits.clone() | other.bits.as_bitslice()).count_ones())
    }

    /// In-place pixel union.
    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        self.check_dims(other)?;
        *self.bits.as_mut_bitslice() |= other.bits.as_bitslice();
        Ok(())
    }

    /// Tight pixel bounding box `(x_min, y_min, x_max, y_max)` with exclusive
    /// max edges, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<[f64; 4]> {
        let mut ones = self.bits.iter_ones();
        let first = ones.next()?;
        let (mut r0, mut c0) = (first / self.width, first % self.width);
        let (mut r1, mut c1) = (r0, c0);
        for idx in ones {
            let (r, c) = (idx / self.width, idx % self.width);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        Some([c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64])
    }

    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for bit in self.bits.iter().by_vals() {
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        RleMask {
            size: [self.height, self.width],
            counts,
        }
    }
}

/// Intersection over union of two masks; `0` when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

/// Row-major run lengths, alternating background/foreground and starting
/// with the background run (which may be zero).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask> {
        let [height, width] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (height * width) as u64 {
            return Err(Error::Format(format!(
                "RLE counts sum to {total}, expected {height}x{width} = {}",
                height * width
            )));
        }
        let mut mask = BinaryMask::empty(height, width);
        let mut pos = 0usize;
        for (k, &run) in self.counts.iter().enumerate() {
            let run = run as usize;
            if k % 2 == 1 {
                mask.bits[pos..pos + run].fill(true);
            }
            pos += run;
        }
        Ok(mask)
    }
}
