//! Dense row-major rasters with an explicit per-pixel validity mask.

use serde::{Deserialize, Serialize};

/// Real-valued raster. Invalid pixels always hold `NaN` in `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    width: usize,
    height: usize,
    samples: Vec<f64>,
    valid: Vec<bool>,
}

impl Grid {
    /// All-zero, all-valid grid.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            samples: vec![0.0; width * height],
            valid: vec![true; width * height],
        }
    }

    /// All-invalid grid.
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            samples: vec![f64::NAN; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a grid from samples; non-finite samples are marked invalid.
    pub fn from_samples(width: usize, height: usize, samples: Vec<f64>) -> Self {
        assert_eq!(samples.len(), width * height, "sample count does not match dimensions");
        let valid: Vec<bool> = samples.iter().map(|v| v.is_finite()).collect();
        let samples = samples
            .into_iter()
            .zip(&valid)
            .map(|(v, &ok)| if ok { v } else { f64::NAN })
            .collect();
        Self {
            width,
            height,
            samples,
            valid,
        }
    }

    /// Builds a grid from samples plus a mask; pixels that are masked out or non-finite are invalid.
    pub fn from_parts(width: usize, height: usize, samples: Vec<f64>, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), width * height, "mask size does not match dimensions");
        let mut g = Self::from_samples(width, height, samples);
        for (i, ok) in valid.into_iter().enumerate() {
            if !ok {
                g.invalidate(i / width, i % width);
            }
        }
        g
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut samples = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                samples.push(f(r, c));
            }
        }
        Self::from_samples(width, height, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.samples[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Value at `(row, col)` if valid.
    #[inline]
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.samples[i])
    }

    /// Writes a finite value and marks the pixel valid; non-finite values invalidate it.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let i = row * self.width + col;
        if v.is_finite() {
            self.samples[i] = v;
            self.valid[i] = true;
        } else {
            self.samples[i] = f64::NAN;
            self.valid[i] = false;
        }
    }

    #[inline]
    pub fn invalidate(&mut self, row: usize, col: usize) {
        let i = row * self.width + col;
        self.samples[i] = f64::NAN;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Iterator over valid sample values in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples
            .iter()
            .zip(&self.valid)
            .filter_map(|(&v, &ok)| ok.then_some(v))
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.samples[row * self.width..(row + 1) * self.width]
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        &self.valid[row * self.width..(row + 1) * self.width]
    }

    /// Applies `f` to every valid sample; results that are non-finite invalidate the pixel.
    pub fn map_valid(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Grid {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                if let Some(v) = self.value(r, c) {
                    out.set(r, c, f(r, c, v));
                }
            }
        }
        out
    }

    /// Valid-pixel (min, max), or `None` when nothing is valid.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.valid_values().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    /// Samples as f32 with NaN in invalid pixels.
    pub fn to_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&v| v as f32).collect()
    }
}

/// Quantized 8-bit image handed to the feature detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl ByteGrid {
    /// Fully valid byte image.
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}
