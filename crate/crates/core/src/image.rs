//! Channel-last floating point images.
//!
//! Pixels are stored row-major, top row first, with channels interleaved:
//! `data[(y * width + x) * channels + c]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image", &[height, width, channels], &[]));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies the window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "crop",
                &[self.height, self.width],
                &[top, left, height, width],
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(height, width, c, data)
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = axis_taps(self.height, height);
        let xs = axis_taps(self.width, width);
        let c = self.channels;
        let mut out = Image::filled(height, width, c, 0.0);
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let top = self.at(y0, x0, ch) * (1.0 - wx) + self.at(y0, x1, ch) * wx;
                    let bot = self.at(y1, x0, ch) * (1.0 - wx) + self.at(y1, x1, ch) * wx;
                    out.set(oy, ox, ch, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.at(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}

/// Source taps `(i0, i1, frac)` for each output index of a resampled axis.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Row-major bilinear interpolation matrix mapping a `src×src` grid onto a
/// `dst×dst` grid: `out = M · in`, `M` of shape `dst² × src²`.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let taps = axis_taps(src, dst);
    let n_in = src * src;
    let mut m = vec![0.0; dst * dst * n_in];
    for (oy, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in taps.iter().enumerate() {
            let row = &mut m[(oy * dst + ox) * n_in..(oy * dst + ox + 1) * n_in];
            let (wy, wx) = (wy as f64, wx as f64);
            row[y0 * src + x0] += (1.0 - wy) * (1.0 - wx);
            row[y0 * src + x1] += (1.0 - wy) * wx;
            row[y1 * src + x0] += wy * (1.0 - wx);
            row[y1 * src + x1] += wy * wx;
        }
    }
    m
}
