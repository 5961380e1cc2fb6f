//! Patch-based vision transformer with a prototype projection head.
//!
//! Weights live in parameter trees generic over the leaf type `P`: the model
//! stores `Tensor<T>` leaves, a bound forward pass uses [`Var`] leaves, and
//! shape-only trees (`Vec<usize>`) let the parameter count be computed
//! without allocating.

mod attnmap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionParams};
use crate::error::{Error, Result};
use crate::image::{bilinear_matrix, Image};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use attnmap::{extract_attention_map, extract_attention_maps, Heatmap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub preset: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Hidden width of the two-layer projection head.
    pub head_hidden: usize,
    /// Prototype count K (projection head output width).
    pub proto_dim: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ViTConfig {
    pub fn tiny() -> Self {
        ViTConfig {
            preset: "tiny".into(),
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4.0,
            head_hidden: 256,
            proto_dim: 256,
            ln_eps: 1e-6,
        }
    }

    pub fn deit_b() -> Self {
        ViTConfig {
            preset: "deit-b".into(),
            image_size: 256,
            patch_size: 16,
            depth: 12,
            d_model: 768,
            heads: 12,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "deit-b" => Ok(Self::deit_b()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_hidden", self.head_hidden),
            ("proto_dim", self.proto_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_hidden() == 0 || self.ln_eps <= 0.0 {
            return Err(Error::Config("mlp_ratio and ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = self.heads;
        let dh = self.head_dim();
        let m = self.mlp_hidden();
        let tokens = 1 + self.grid() * self.grid();
        let embed = self.patch_dim() * d + d + d + tokens * d;
        let block = 4 * d + h * 3 * d * dh + h * dh * d + d + d * m + m + m * d + d;
        let head = d * self.head_hidden + self.head_hidden + self.head_hidden * self.proto_dim + self.proto_dim;
        embed + self.depth * block + 2 * d + head
    }

    /// Parameter tree holding each leaf's shape.
    pub fn weight_shapes(&self) -> ViTWeights<Vec<usize>> {
        let d = self.d_model;
        let dh = self.head_dim();
        let m = self.mlp_hidden();
        let tokens = 1 + self.grid() * self.grid();
        let block = || BlockWeights {
            ln1_g: vec![d],
            ln1_b: vec![d],
            attn: AttentionParams {
                heads: self.heads,
                d_model: d,
                d_k: dh,
                d_v: dh,
                w_q: vec![vec![d, dh]; self.heads],
                w_k: vec![vec![d, dh]; self.heads],
                w_v: vec![vec![d, dh]; self.heads],
                w_o: vec![self.heads * dh, d],
                b_o: vec![d],
            },
            ln2_g: vec![d],
            ln2_b: vec![d],
            mlp_w1: vec![d, m],
            mlp_b1: vec![m],
            mlp_w2: vec![m, d],
            mlp_b2: vec![d],
        };
        ViTWeights {
            patch_w: vec![self.patch_dim(), d],
            patch_b: vec![d],
            cls: vec![1, d],
            pos: vec![tokens, d],
            blocks: (0..self.depth).map(|_| block()).collect(),
            norm_g: vec![d],
            norm_b: vec![d],
            head: HeadWeights {
                w1: vec![d, self.head_hidden],
                b1: vec![self.head_hidden],
                w2: vec![self.head_hidden, self.proto_dim],
                b2: vec![self.proto_dim],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub attn: AttentionParams<P>,
    pub ln2_g: P,
    pub ln2_b: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

impl<P> BlockWeights<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> BlockWeights<Q> {
        BlockWeights {
            ln1_g: f(&format!("{prefix}.ln1_g"), &self.ln1_g),
            ln1_b: f(&format!("{prefix}.ln1_b"), &self.ln1_b),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            ln2_g: f(&format!("{prefix}.ln2_g"), &self.ln2_g),
            ln2_b: f(&format!("{prefix}.ln2_b"), &self.ln2_b),
            mlp_w1: f(&format!("{prefix}.mlp_w1"), &self.mlp_w1),
            mlp_b1: f(&format!("{prefix}.mlp_b1"), &self.mlp_b1),
            mlp_w2: f(&format!("{prefix}.mlp_w2"), &self.mlp_w2),
            mlp_b2: f(&format!("{prefix}.mlp_b2"), &self.mlp_b2),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.ln1_g"), &mut self.ln1_g);
        f(&format!("{prefix}.ln1_b"), &mut self.ln1_b);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(&format!("{prefix}.ln2_g"), &mut self.ln2_g);
        f(&format!("{prefix}.ln2_b"), &mut self.ln2_b);
        f(&format!("{prefix}.mlp_w1"), &mut self.mlp_w1);
        f(&format!("{prefix}.mlp_b1"), &mut self.mlp_b1);
        f(&format!("{prefix}.mlp_w2"), &mut self.mlp_w2);
        f(&format!("{prefix}.mlp_b2"), &mut self.mlp_b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls: P,
    pub pos: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub norm_g: P,
    pub norm_b: P,
    pub head: HeadWeights<P>,
}

impl<P> ViTWeights<P> {
    /// Structure-preserving transform; leaves are visited in canonical order.
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> ViTWeights<Q> {
        ViTWeights {
            patch_w: f(&format!("{prefix}patch_w"), &self.patch_w),
            patch_b: f(&format!("{prefix}patch_b"), &self.patch_b),
            cls: f(&format!("{prefix}cls"), &self.cls),
            pos: f(&format!("{prefix}pos"), &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}blocks.{i}"), f))
                .collect(),
            norm_g: f(&format!("{prefix}norm_g"), &self.norm_g),
            norm_b: f(&format!("{prefix}norm_b"), &self.norm_b),
            head: HeadWeights {
                w1: f(&format!("{prefix}head.w1"), &self.head.w1),
                b1: f(&format!("{prefix}head.b1"), &self.head.b1),
                w2: f(&format!("{prefix}head.w2"), &self.head.w2),
                b2: f(&format!("{prefix}head.b2"), &self.head.b2),
            },
        }
    }

    /// Mutable visit in the same canonical order as [`ViTWeights::map`].
    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}patch_w"), &mut self.patch_w);
        f(&format!("{prefix}patch_b"), &mut self.patch_b);
        f(&format!("{prefix}cls"), &mut self.cls);
        f(&format!("{prefix}pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}"), f);
        }
        f(&format!("{prefix}norm_g"), &mut self.norm_g);
        f(&format!("{prefix}norm_b"), &mut self.norm_b);
        f(&format!("{prefix}head.w1"), &mut self.head.w1);
        f(&format!("{prefix}head.b1"), &mut self.head.b1);
        f(&format!("{prefix}head.w2"), &mut self.head.w2);
        f(&format!("{prefix}head.b2"), &mut self.head.b2);
    }

    /// Leaves flattened in canonical order.
    pub fn leaves(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map("", &mut |name, p| out.push((name.to_string(), p)));
        out
    }
}

/// Per-view outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct ViewOutput {
    /// Class-token embedding after the final norm, `1 × d_model`.
    pub cls: Var,
    /// Projection head output, `1 × K`.
    pub logits: Var,
    /// Final block attention weights, one `T × T` matrix per head.
    pub attn_last: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel<T: Element = f32> {
    config: ViTConfig,
    weights: ViTWeights<Tensor<T>>,
}

/// Projection head init scale, `0.5 / sqrt(fan_in)`.
fn head_std(fan_in: usize) -> f64 {
    0.5 / (fan_in as f64).sqrt()
}

fn sample_weights<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

impl<T: Element> ViTModel<T> {
    /// Truncated-normal weights (std 0.02 in the backbone, scaled by fan-in
    /// in the projection head), zero biases, unit norm gains.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = config.weight_shapes().map("", &mut |name, shape| {
            // every 1-D leaf is a norm gain or a bias
            let t = match shape.len() {
                1 if name.ends_with("_g") => Tensor::ones(shape.clone()),
                1 => Tensor::zeros(shape.clone()),
                // prototype logits must vary across images by more than the
                // teacher temperature, or centering flattens them to uniform
                _ if name.starts_with("head.") => sample_weights(shape, head_std(shape[0]), &mut rng),
                _ => sample_weights(shape, 0.02, &mut rng),
            };
            t.with_requires_grad(true)
        });
        Ok(ViTModel { config, weights })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_named(config: ViTConfig, mut named: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut missing = None;
        let weights = config.weight_shapes().map("", &mut |name, shape| match named(name) {
            Some(t) if t.shape() == shape.as_slice() => t.with_requires_grad(true),
            Some(t) => {
                missing.get_or_insert_with(|| format!("{name}: shape {:?}, expected {shape:?}", t.shape()));
                Tensor::zeros(shape.clone())
            }
            None => {
                missing.get_or_insert_with(|| format!("{name}: missing"));
                Tensor::zeros(shape.clone())
            }
        });
        match missing {
            Some(msg) => Err(Error::Format(msg)),
            None => Ok(ViTModel { config, weights }),
        }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn weights(&self) -> &ViTWeights<Tensor<T>> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ViTWeights<Tensor<T>> {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.leaves().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.weights.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
    }

    pub fn zero_grad(&mut self) {
        self.weights.visit_mut("", &mut |_, t| t.zero_grad());
    }

    pub fn cast<U: Element>(&self) -> ViTModel<U> {
        ViTModel {
            config: self.config.clone(),
            weights: self.weights.map("", &mut |_, t| t.cast()),
        }
    }

    /// Registers every weight on `tape` with labels `{prefix}{name}`.
    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> ViTWeights<Var> {
        self.weights.map(prefix, &mut |name, t| tape.param(name, t))
    }

    fn positional(&self, tape: &mut Tape<T>, w: &ViTWeights<Var>, grid: usize) -> Result<Var> {
        let native = self.config.grid();
        if grid == native {
            return Ok(w.pos);
        }
        let cls = tape.slice_rows(w.pos, 0, 1)?;
        let patches = tape.slice_rows(w.pos, 1, native * native)?;
        let m = Tensor::from_f64(vec![grid * grid, native * native], &bilinear_matrix(native, grid))?;
        let mv = tape.constant(m);
        let interp = tape.matmul(mv, patches)?;
        tape.concat_rows(&[cls, interp])
    }

    /// Records the forward pass of one view.
    pub fn forward_view(&self, tape: &mut Tape<T>, w: &ViTWeights<Var>, image: &Image) -> Result<ViewOutput> {
        let cfg = &self.config;
        if image.channels != cfg.channels {
            return Err(Error::shape("vit channels", &[image.channels], &[cfg.channels]));
        }
        if image.height != image.width {
            return Err(Error::shape("vit square input", &[image.height, image.width], &[]));
        }
        let tokens = patchify::<T>(image, cfg.patch_size)?;
        let grid = image.height / cfg.patch_size;
        let eps = cfg.ln_eps;

        let x = tape.constant(tokens);
        let emb = tape.matmul(x, w.patch_w)?;
        let emb = tape.add_row(emb, w.patch_b)?;
        let seq = tape.concat_rows(&[w.cls, emb])?;
        let pos = self.positional(tape, w, grid)?;
        let mut h = tape.add(seq, pos)?;

        let mut attn_last = Vec::new();
        for b in &w.blocks {
            let n1 = tape.layer_norm(h, b.ln1_g, b.ln1_b, eps)?;
            let (a, weights) = multi_head(tape, n1, n1, &b.attn)?;
            h = tape.add(h, a)?;
            let n2 = tape.layer_norm(h, b.ln2_g, b.ln2_b, eps)?;
            let m = tape.matmul(n2, b.mlp_w1)?;
            let m = tape.add_row(m, b.mlp_b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, b.mlp_w2)?;
            let m = tape.add_row(m, b.mlp_b2)?;
            h = tape.add(h, m)?;
            attn_last = weights;
        }
        // the final norm is row-wise, so normalizing only the class row is exact
        let cls_row = tape.slice_rows(h, 0, 1)?;
        let cls = tape.layer_norm(cls_row, w.norm_g, w.norm_b, eps)?;
        let z = tape.matmul(cls, w.head.w1)?;
        let z = tape.add_row(z, w.head.b1)?;
        let z = tape.gelu(z);
        let z = tape.matmul(z, w.head.w2)?;
        let logits = tape.add_row(z, w.head.b2)?;
        Ok(ViewOutput { cls, logits, attn_last })
    }
}

/// Splits an image into flattened non-overlapping patches.
///
/// Patches are ordered row-major from the top-left corner. Within a patch,
/// pixels are row-major and each pixel contributes its channels in order, so
/// token `r` column `(py * p + px) * C + c` is pixel `(py, px)` channel `c`.
pub fn patchify<T: Element>(image: &Image, patch_size: usize) -> Result<Tensor<T>> {
    let p = patch_size;
    if p == 0 || !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
        return Err(Error::shape("patchify", &[image.height, image.width], &[p]));
    }
    let (gh, gw, c) = (image.height / p, image.width / p, image.channels);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * image.width + gx * p) * c;
                data.extend(image.data[start..start + p * c].iter().map(|&v| T::from_f64(v as f64)));
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Batched value-only forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element> {
    /// `B × d_model`
    pub cls_embed: Tensor<T>,
    /// `B × K`
    pub proto_logits: Tensor<T>,
    /// `B × heads × T × T`
    pub attn_last: Tensor<T>,
}

pub fn vit_forward<T: Element>(model: &ViTModel<T>, images: &[Image]) -> Result<ForwardOutput<T>> {
    if images.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut cls = Vec::new();
    let mut logits = Vec::new();
    let mut attn = Vec::new();
    let mut tokens = None;
    for img in images {
        let mut tape = Tape::no_grad();
        let w = model.bind(&mut tape, "");
        let out = model.forward_view(&mut tape, &w, img)?;
        cls.extend_from_slice(tape.value(out.cls).data());
        logits.extend_from_slice(tape.value(out.logits).data());
        let t = tape.value(out.attn_last[0]).rows();
        if *tokens.get_or_insert(t) != t {
            return Err(Error::shape("vit_forward batch", &[tokens.unwrap_or(0)], &[t]));
        }
        for &h in &out.attn_last {
            attn.extend_from_slice(tape.value(h).data());
        }
    }
    let b = images.len();
    let cfg = model.config();
    let t = tokens.unwrap_or(1);
    Ok(ForwardOutput {
        cls_embed: Tensor::new(vec![b, cfg.d_model], cls)?,
        proto_logits: Tensor::new(vec![b, cfg.proto_dim], logits)?,
        attn_last: Tensor::new(vec![b, cfg.heads, t, t], attn)?,
    })
}
