use std::path::Path;

use super::ViTModel;
use crate::data::image_io;
use crate::error::{Error, Result};
use crate::image::{axis_taps, Image};
use crate::tensor::{Element, Tape};

/// Attention heatmap with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// 8-bit grayscale PNG, `round(v·255)` per pixel.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image_io::write_png(path, self.width, self.height, 1, &bytes)
    }

    /// One CSV line per image row, comma-separated raw values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Final-block class-token attention over patch tokens, averaged over
/// heads, min-max normalized on the patch grid and bilinearly upsampled to
/// the image size. A constant grid (min == max) maps to all zeros.
pub fn extract_attention_map<T: Element>(model: &ViTModel<T>, image: &Image) -> Result<Heatmap> {
    let mut tape = Tape::no_grad();
    let w = model.bind(&mut tape, "");
    let out = model.forward_view(&mut tape, &w, image)?;
    let grid = image.height / model.config().patch_size;
    let n = grid * grid;

    let mut cells = vec![0.0f64; n];
    for &head in &out.attn_last {
        let weights = tape.value(head);
        for (j, c) in cells.iter_mut().enumerate() {
            *c += weights.get(0, j + 1).as_f64();
        }
    }
    let heads = out.attn_last.len() as f64;
    cells.iter_mut().for_each(|c| *c /= heads);

    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if hi > lo {
        cells.iter_mut().for_each(|c| *c = (*c - lo) / (hi - lo));
    } else {
        cells.iter_mut().for_each(|c| *c = 0.0);
    }

    let ys = axis_taps(grid, image.height);
    let xs = axis_taps(grid, image.width);
    let mut values = Vec::with_capacity(image.height * image.width);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let (wy, wx) = (wy as f64, wx as f64);
            let top = cells[y0 * grid + x0] * (1.0 - wx) + cells[y0 * grid + x1] * wx;
            let bot = cells[y1 * grid + x0] * (1.0 - wx) + cells[y1 * grid + x1] * wx;
            values.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
        }
    }
    Ok(Heatmap {
        height: image.height,
        width: image.width,
        values,
    })
}

pub fn extract_attention_maps<T: Element>(model: &ViTModel<T>, images: &[Image]) -> Result<Vec<Heatmap>> {
    images.iter().map(|img| extract_attention_map(model, img)).collect()
}
