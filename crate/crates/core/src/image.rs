//! Dense multi-channel images and depth maps.
//!
//! Pixel `(x, y)` sits at continuous coordinate `(x, y)` (pixel-center
//! convention). Samples whose bilinear footprint leaves `[0, W-1] x [0, H-1]`
//! are reported invalid rather than clamped.

use crate::error::{OccError, Result};

/// H x W x C scalar field stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(OccError::invalid("image needs at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(OccError::ShapeMismatch(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds a single-channel image from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    #[inline]
    fn footprint(&self, u: f64, v: f64) -> Option<(usize, usize, usize, usize, f64, f64)> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width - 1);
        let y0 = (v.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        Some((x0, y0, x1, y1, u - x0 as f64, v - y0 as f64))
    }

    /// Bilinear sample written into `out` (length = channels). Returns
    /// `false` and leaves `out` untouched when the footprint is outside.
    pub fn bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let Some((x0, y0, x1, y1, fx, fy)) = self.footprint(u, v) else {
            return false;
        };
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        for ch in 0..self.channels {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bot = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bot - top) * fy;
        }
        true
    }

    pub fn bilinear_sample(&self, u: f64, v: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_into(u, v, &mut out).then_some(out)
    }

    /// Bilinear sample with its partial derivatives along `u` and `v`.
    pub fn bilinear_with_grad(
        &self,
        u: f64,
        v: f64,
        value: &mut [f64],
        d_du: &mut [f64],
        d_dv: &mut [f64],
    ) -> bool {
        let Some((x0, y0, x1, y1, fx, fy)) = self.footprint(u, v) else {
            return false;
        };
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        let sx = if x1 > x0 { 1.0 } else { 0.0 };
        let sy = if y1 > y0 { 1.0 } else { 0.0 };
        for ch in 0..self.channels {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bot = c[ch] + (d[ch] - c[ch]) * fx;
            value[ch] = top + (bot - top) * fy;
            d_du[ch] = sx * ((b[ch] - a[ch]) * (1.0 - fy) + (d[ch] - c[ch]) * fy);
            d_dv[ch] = sy * (bot - top);
        }
        true
    }
}

/// H x W metric z-depths with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Depth map where every pixel is valid.
    pub fn from_values(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(OccError::ShapeMismatch(format!(
                "depth map has {} values, expected {}",
                depth.len(),
                width * height
            )));
        }
        Ok(DepthMap {
            width,
            height,
            valid: vec![true; depth.len()],
            depth,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let i = y * self.width + x;
        self.depth[i] = d;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}
