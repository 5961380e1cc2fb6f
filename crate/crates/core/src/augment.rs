//! Standardization and multi-crop view generation.
//!
//! Each view is a random area-scaled crop resized to the view size, followed
//! by the photometric transforms. Per view, random draws are consumed in this
//! order: crop attempts (scale, log aspect ratio, top, left per attempt), flip
//! draw, grayscale draw, then the optional jitter and blur draws when those
//! are enabled.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::rng_for;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

/// Per-channel mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over all pixels of `images` (already resized).
    /// A zero-variance channel gets divisor 1.
    pub fn compute(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("statistics need at least one image".into()))?;
        let c = first.channels;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut count = 0usize;
        for img in images {
            if img.channels != c {
                return Err(Error::shape("channel stats", &[c], &[img.channels]));
            }
            for px in img.data.chunks(c) {
                for (ch, &v) in px.iter().enumerate() {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += img.height * img.width;
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let m = sum[ch] / n;
            let var = (sq[ch] / n - m * m).max(0.0);
            mean.push(m as f32);
            std.push(if var.sqrt() > 1e-6 {
                var.sqrt() as f32
            } else {
                warn!("channel {ch} has zero variance; using unit divisor");
                1.0
            });
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, img: &mut Image) -> Result<()> {
        if img.channels != self.mean.len() {
            return Err(Error::shape("standardize", &[self.mean.len()], &[img.channels]));
        }
        let c = img.channels;
        for px in img.data.chunks_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(())
    }
}

/// Scales to `[0, 1]`, replicates gray to `channels`, resizes the shorter
/// side to `base` and center-crops a `base × base` square.
pub fn square_resize(raw: &RawImage, base: usize, channels: usize) -> Result<Image> {
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::Contract("empty image".into()));
    }
    let mut img = raw.to_image();
    if img.channels != channels {
        if img.channels != 1 {
            return Err(Error::shape("image channels", &[channels], &[img.channels]));
        }
        let data = img
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        img = Image::new(img.height, img.width, channels, data)?;
    }
    let short = img.height.min(img.width) as f64;
    let h = ((img.height as f64 * base as f64 / short).round() as usize).max(base);
    let w = ((img.width as f64 * base as f64 / short).round() as usize).max(base);
    let resized = img.resize(h, w);
    resized.crop((h - base) / 2, (w - base) / 2, base, base)
}

/// Square resize followed by per-channel standardization.
pub fn standardize_image(raw: &RawImage, base: usize, stats: &ChannelStats) -> Result<Image> {
    let mut img = square_resize(raw, base, stats.mean.len())?;
    stats.apply(&mut img)?;
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub count: usize,
    /// Crop area range as a fraction of the source area.
    pub scale: (f64, f64),
    pub size: usize,
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "{:?} scale range ({lo}, {hi}) outside 0 < lo <= hi <= 1",
                self.kind
            )));
        }
        if self.count == 0 || self.size == 0 {
            return Err(Error::Config(format!(
                "{:?} view count and size must be >= 1",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub p_flip: f64,
    pub p_gray: f64,
    pub color_jitter: bool,
    pub blur: bool,
}

impl Default for Photometric {
    fn default() -> Self {
        Photometric {
            p_flip: 0.5,
            p_gray: 0.2,
            color_jitter: false,
            blur: false,
        }
    }
}

impl Photometric {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_flip", self.p_flip), ("p_gray", self.p_gray)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub global: ViewSpec,
    pub local: ViewSpec,
    pub photometric: Photometric,
}

impl ViewConfig {
    /// Defaults for a model with the given input size: globals at full
    /// size, locals at half.
    pub fn for_size(size: usize) -> Self {
        ViewConfig {
            global: ViewSpec {
                kind: ViewKind::Global,
                count: 2,
                scale: (0.4, 1.0),
                size,
            },
            local: ViewSpec {
                kind: ViewKind::Local,
                count: 8,
                scale: (0.05, 0.4),
                size: size / 2,
            },
            photometric: Photometric::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.local.validate()?;
        if self.global.size < self.local.size {
            return Err(Error::Config("global view size must be >= local view size".into()));
        }
        self.photometric.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub source: usize,
    pub seed: u64,
}

/// Crop window `(top, left, height, width)` inside an `h × w` source.
pub fn sample_crop(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    scale: (f64, f64),
) -> Result<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    if scale.0 * area < 1.0 {
        return Err(Error::Config(format!(
            "scale {} of a {h}x{w} image is a sub-pixel crop",
            scale.0
        )));
    }
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        let top = rng.gen_range(0..=h.saturating_sub(ch));
        let left = rng.gen_range(0..=w.saturating_sub(cw));
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            return Ok((top, left, ch, cw));
        }
    }
    // Fallback: central crop at the largest in-range aspect ratio.
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < 3.0 / 4.0 {
        (((w as f64) * 4.0 / 3.0).round() as usize, w)
    } else if ratio > 4.0 / 3.0 {
        (h, ((h as f64) * 4.0 / 3.0).round() as usize)
    } else {
        (h, w)
    };
    Ok(((h - ch) / 2, (w - cw) / 2, ch, cw))
}

pub fn grayscale(img: &Image) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let l = (LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64) as f32;
        px.fill(l);
    }
    out
}

fn box_blur(img: &Image) -> Image {
    let mut out = img.clone();
    let (h, w) = (img.height as isize, img.width as isize);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..h).contains(&yy) && (0..w).contains(&xx) {
                            acc += img.at(yy as usize, xx as usize, c);
                            n += 1.0;
                        }
                    }
                }
                out.set(y as usize, x as usize, c, acc / n);
            }
        }
    }
    out
}

/// Flip with probability `p_flip`, then grayscale with probability
/// `p_gray`. Both draws are always consumed.
pub fn apply_photometric(view: &Image, rng: &mut ChaCha8Rng, cfg: &Photometric) -> Image {
    let flip = rng.gen::<f64>() < cfg.p_flip;
    let gray = rng.gen::<f64>() < cfg.p_gray;
    let mut out = if flip { view.flip_horizontal() } else { view.clone() };
    if gray {
        out = grayscale(&out);
    }
    if cfg.color_jitter {
        let brightness = rng.gen_range(-0.2f32..=0.2);
        let contrast = rng.gen_range(0.8f32..=1.2);
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        out.data
            .iter_mut()
            .for_each(|v| *v = (*v - mean) * contrast + mean + brightness);
    }
    if cfg.blur && rng.gen::<f64>() < 0.5 {
        out = box_blur(&out);
    }
    out
}

fn one_view(img: &Image, spec: &ViewSpec, rng: &mut ChaCha8Rng, photo: &Photometric) -> Result<Image> {
    let (top, left, h, w) = sample_crop(rng, img.height, img.width, spec.scale)?;
    let view = img.crop(top, left, h, w)?.resize(spec.size, spec.size);
    Ok(apply_photometric(&view, rng, photo))
}

/// Globals first, then locals, all from one generator seeded by `seed`.
pub fn make_views(image: &Image, cfg: &ViewConfig, source: usize, seed: u64) -> Result<CropSet> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[]);
    let globals = (0..cfg.global.count)
        .map(|_| one_view(image, &cfg.global, &mut rng, &cfg.photometric))
        .collect::<Result<_>>()?;
    let locals = (0..cfg.local.count)
        .map(|_| one_view(image, &cfg.local, &mut rng, &cfg.photometric))
        .collect::<Result<_>>()?;
    Ok(CropSet {
        globals,
        locals,
        source,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|i| (i % 251) as f32 / 250.0).collect();
        Image::new(h, w, c, data).unwrap()
    }

    fn raw_gradient(h: usize, w: usize) -> RawImage {
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&[(x * 255 / (w - 1)) as u8, (y * 255 / (h - 1)) as u8, 128]);
            }
        }
        RawImage {
            height: h,
            width: w,
            channels: 3,
            pixels,
        }
    }

    #[test]
    fn large_input_resized_to_base() {
        let raw = raw_gradient(512, 512);
        let img = standardize_image(&raw, 256, &ChannelStats::identity(3)).unwrap();
        assert_eq!((img.height, img.width, img.channels), (256, 256, 3));
    }

    #[test]
    fn non_square_resize_then_center_crop() {
        // 60 rows x 100 columns: shorter side 60 -> 32, width 100 -> 53,
        // then columns 10..42 are kept.
        let raw = raw_gradient(60, 100);
        let img = square_resize(&raw, 32, 3).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        let full = raw.to_image().resize(32, 53);
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert_eq!(img.at(y, x, c), full.at(y, x + 10, c));
                }
            }
        }
        // columns still increase left to right in the red channel
        assert!(img.at(5, 31, 0) > img.at(5, 0, 0));
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let img = Image::filled(8, 8, 3, 0.25);
        let stats = ChannelStats::compute(std::slice::from_ref(&img)).unwrap();
        assert_eq!(stats.std, vec![1.0; 3]);
        let mut out = img.clone();
        stats.apply(&mut out).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gray_input_replicated() {
        let raw = RawImage {
            height: 2,
            width: 2,
            channels: 1,
            pixels: vec![0, 51, 102, 255],
        };
        let img = square_resize(&raw, 2, 3).unwrap();
        assert_eq!(&img.data[3..6], &[0.2, 0.2, 0.2]);
    }

    #[test]
    fn cardinality_and_determinism() {
        let img = ramp(32, 32, 3);
        let cfg = ViewConfig::for_size(32);
        let a = make_views(&img, &cfg, 3, 11).unwrap();
        assert_eq!((a.globals.len(), a.locals.len()), (2, 8));
        assert!(a.globals.iter().all(|g| g.height == 32 && g.width == 32));
        assert!(a.locals.iter().all(|l| l.height == 16 && l.width == 16));
        assert_eq!(a, make_views(&img, &cfg, 3, 11).unwrap());
        assert_ne!(a, make_views(&img, &cfg, 3, 12).unwrap());
    }

    #[test]
    fn full_scale_global_is_resized_image() {
        let img = ramp(24, 24, 3);
        let mut cfg = ViewConfig::for_size(16);
        cfg.global.scale = (1.0, 1.0);
        cfg.photometric = Photometric {
            p_flip: 0.0,
            p_gray: 0.0,
            ..Photometric::default()
        };
        for seed in 0..20 {
            let set = make_views(&img, &cfg, 0, seed).unwrap();
            for g in &set.globals {
                assert_eq!(g, &img.resize(16, 16));
            }
        }
    }

    #[test]
    fn crops_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let (t, l, h, w) = sample_crop(&mut rng, 20, 30, (0.05, 0.4)).unwrap();
            assert!(h >= 1 && w >= 1 && t + h <= 20 && l + w <= 30);
        }
        assert!(matches!(
            sample_crop(&mut rng, 4, 4, (0.01, 0.1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn photometric_identity_involution_idempotence() {
        let img = ramp(5, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = Photometric {
            p_flip: 0.0,
            p_gray: 0.0,
            ..Photometric::default()
        };
        assert_eq!(apply_photometric(&img, &mut rng, &none), img);
        let flip = Photometric {
            p_flip: 1.0,
            ..none.clone()
        };
        let twice = apply_photometric(&apply_photometric(&img, &mut rng, &flip), &mut rng, &flip);
        assert_eq!(twice, img);
        let gray = Photometric { p_gray: 1.0, ..none };
        let g = apply_photometric(&img, &mut rng, &gray);
        assert_eq!(apply_photometric(&g, &mut rng, &gray), g);
        // luminance oracle on one pixel
        let want = 0.299 * img.at(0, 1, 0) as f64 + 0.587 * img.at(0, 1, 1) as f64 + 0.114 * img.at(0, 1, 2) as f64;
        assert!((g.at(0, 1, 2) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut cfg = ViewConfig::for_size(32);
        cfg.local.scale = (0.5, 0.2);
        assert!(cfg.validate().is_err());
        let mut cfg = ViewConfig::for_size(32);
        cfg.local.size = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ViewConfig::for_size(32);
        cfg.photometric.p_gray = 1.5;
        assert!(cfg.validate().is_err());
    }
}
