//! Two-dimensional views of embeddings: t-SNE, class centroids, cluster
//! quality and scatter export.

pub mod tsne;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image_io;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use tsne::{conditional_entropies, joint_affinities, tsne_embed, TsneConfig, TsneRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub datasets: Vec<String>,
    pub classes: Vec<usize>,
}

impl Embedding2D {
    pub fn new(points: Vec<[f64; 2]>, datasets: Vec<String>, classes: Vec<usize>) -> Result<Self> {
        if datasets.len() != points.len() || classes.len() != points.len() {
            return Err(Error::shape(
                "embedding metadata",
                &[points.len()],
                &[datasets.len(), classes.len()],
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding coordinates".into()));
        }
        Ok(Embedding2D {
            points,
            datasets,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,dataset,class\n");
        for ((p, d), c) in self.points.iter().zip(&self.datasets).zip(&self.classes) {
            out.push_str(&format!("{:.6},{:.6},{d},{c}\n", p[0], p[1]));
        }
        out
    }

    /// Scatter plot on a white square canvas, one color per (dataset, class)
    /// group in sorted order.
    pub fn render(&self, size: usize) -> Vec<u8> {
        let mut pixels = vec![255u8; size * size * 3];
        if self.is_empty() || size < 8 {
            return pixels;
        }
        let groups: BTreeMap<(&str, usize), usize> = self
            .datasets
            .iter()
            .zip(&self.classes)
            .map(|(d, &c)| (d.as_str(), c))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, g)| (g, i))
            .collect();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &self.points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let margin = 4.0;
        let span = (size as f64 - 2.0 * margin).max(1.0);
        let to_px = |v: f64, c: usize| {
            let range = hi[c] - lo[c];
            let t = if range > 0.0 { (v - lo[c]) / range } else { 0.5 };
            (margin + t * span).round() as isize
        };
        for ((p, d), &c) in self.points.iter().zip(&self.datasets).zip(&self.classes) {
            let color = palette(groups[&(d.as_str(), c)]);
            let (x, y) = (to_px(p[0], 0), size as isize - 1 - to_px(p[1], 1));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (px, py) = (x + dx, y + dy);
                    if px < 0 || py < 0 || px >= size as isize || py >= size as isize {
                        continue;
                    }
                    let at = (py as usize * size + px as usize) * 3;
                    pixels[at..at + 3].copy_from_slice(&color);
                }
            }
        }
        pixels
    }

    pub fn write_png(&self, path: &Path, size: usize) -> Result<()> {
        image_io::write_png(path, size, size, 3, &self.render(size))
    }
}

fn palette(i: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    COLORS[i % COLORS.len()]
}

/// Per-class mean of the rows of `features`, `C × d` for labels in `0..C`.
pub fn class_centroids<T: Element>(features: &Tensor<T>, labels: &[usize]) -> Result<Tensor<f64>> {
    if features.ndim() != 2 || features.rows() != labels.len() {
        return Err(Error::shape("class_centroids", features.shape(), &[labels.len()]));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.cols();
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(features.row(r)) {
            *s += v.as_f64();
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("class {empty} has no samples")));
    }
    for (row, &n) in sums.chunks_mut(d.max(1)).zip(&counts) {
        row.iter_mut().for_each(|s| *s /= n as f64);
    }
    Tensor::new(vec![classes, d], sums)
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0. Needs at least two clusters.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let clusters: BTreeMap<usize, usize> = labels.iter().fold(BTreeMap::new(), |mut m, &l| {
        *m.entry(l).or_insert(0) += 1;
        m
    });
    if clusters.len() < 2 {
        return Err(Error::Domain("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        if clusters[&labels[i]] == 1 {
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                *sums.entry(labels[j]).or_insert(0.0) += (p[0] - q[0]).hypot(p[1] - q[1]);
            }
        }
        let own = labels[i];
        let a = sums[&own] / (clusters[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != own)
            .map(|(l, s)| s / clusters[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
