//! Single affine classifier on backbone class-token features.
//!
//! Features are standardized per dimension with statistics of the training
//! features (fixed at the start in end-to-end mode), and the standardization
//! is stored with the probe. Training is full-batch gradient descent with
//! momentum on the mean cross-entropy. Dropout (inverted, rate `p`) is applied to the features
//! during training only; masks are drawn row-major from a generator seeded by
//! `(seed, epoch)`. After every epoch the validation macro AUC is computed and
//! the best epoch is kept, earliest on ties.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::macro_metrics;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{GradBuffer, Sgd};
use crate::seed::rng_for;
use crate::tensor::{self, lit, Element, Tape, Tensor, Var};
use crate::vit::ViTModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Frozen,
    EndToEnd,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Frozen => "frozen",
            ProbeMode::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Epochs in end-to-end mode, where each epoch runs the backbone.
    pub e2e_epochs: usize,
    pub lr: f64,
    /// Probe learning rate in end-to-end mode.
    pub e2e_lr: f64,
    /// Backbone learning rate as a multiple of `e2e_lr`.
    pub backbone_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

/// Gradient norm bound for backbone updates in end-to-end mode.
const BACKBONE_GRAD_CLIP: f64 = 1.0;

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            e2e_epochs: 15,
            lr: 0.5,
            e2e_lr: 0.1,
            backbone_lr_scale: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 || self.e2e_epochs == 0 || !(self.lr > 0.0) || !(self.e2e_lr > 0.0) {
            return Err(Error::Config("probe epochs and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.backbone_lr_scale < 0.0 {
            return Err(Error::Config(
                "probe momentum in [0, 1), weight decay and backbone scale >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe<T: Element = f32> {
    /// `d × C`
    pub weight: Tensor<T>,
    /// `C`
    pub bias: Tensor<T>,
    /// Per-feature shift and inverse scale applied before the affine map.
    pub feature_mean: Vec<T>,
    pub feature_inv_std: Vec<T>,
    pub dropout: f64,
}

impl<T: Element> LinearProbe<T> {
    pub fn zeros(dim: usize, classes: usize, dropout: f64) -> Self {
        LinearProbe {
            weight: Tensor::zeros(vec![dim, classes]),
            bias: Tensor::zeros(vec![classes]),
            feature_mean: vec![T::zero(); dim],
            feature_inv_std: vec![T::one(); dim],
            dropout,
        }
    }

    /// Zero probe standardizing with the statistics of `features`.
    /// Constant features keep unit scale.
    pub fn fitted_to(features: &Tensor<T>, classes: usize, dropout: f64) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut probe = LinearProbe::zeros(d, classes, dropout);
        for j in 0..d {
            let col = (0..n).map(|r| features.get(r, j).as_f64());
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            probe.feature_mean[j] = lit(mean);
            probe.feature_inv_std[j] = lit(if std > 1e-8 { 1.0 / std } else { 1.0 });
        }
        probe
    }

    pub fn standardize(&self, features: &Tensor<T>) -> Tensor<T> {
        let mut x = features.detached();
        let d = self.dim();
        for row in x.data_mut().chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.feature_mean).zip(&self.feature_inv_std) {
                *v = (*v - m) * s;
            }
        }
        x
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    /// Class probabilities, `N × C`, dropout disabled.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.ndim() != 2 || features.cols() != self.dim() {
            return Err(Error::shape("probe predict", features.shape(), self.weight.shape()));
        }
        let mut logits = tensor::matmul(&self.standardize(features), &self.weight)?;
        let c = self.classes();
        for row in logits.data_mut().chunks_mut(c) {
            row.iter_mut().zip(self.bias.data()).for_each(|(v, &b)| *v += b);
        }
        tensor::softmax_rows(&logits, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit<T: Element = f32> {
    pub probe: LinearProbe<T>,
    /// Fine-tuned backbone at the selected epoch (end-to-end mode only).
    pub backbone: Option<ViTModel<T>>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub train_loss: Vec<f64>,
}

/// Class-token features of `model` for each image, `N × d_model`.
pub fn extract_features<T: Element>(model: &ViTModel<T>, images: &[Image]) -> Result<Tensor<T>> {
    let d = model.config().d_model;
    if images.is_empty() {
        return Err(Error::Contract("no images to embed".into()));
    }
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        let mut tape = Tape::no_grad();
        let w = model.bind(&mut tape, "");
        let out = model.forward_view(&mut tape, &w, img)?;
        data.extend_from_slice(tape.value(out.cls).data());
    }
    Tensor::new(vec![images.len(), d], data)
}

fn dropout_mask<T: Element>(rng: &mut impl Rng, n: usize, p: f64) -> Vec<T> {
    let keep = lit::<T>(1.0 / (1.0 - p));
    (0..n)
        .map(|_| {
            if p > 0.0 && rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Records the probe loss: cross-entropy of `x·w + b` against the
/// one-hot `targets`, summed and divided by `denom`.
pub fn ce_loss<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    targets: Tensor<T>,
    denom: usize,
) -> Result<Var> {
    let logits = tape.matmul(x, w)?;
    let logits = tape.add_row(logits, b)?;
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let y = tape.constant(targets);
    let picked = tape.mul(y, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / denom as f64))
}

fn val_auc<T: Element>(probe: &LinearProbe<T>, features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let m = macro_metrics(&probe.predict(features)?, labels)?;
    Ok(m.auc)
}

fn check_labels(n: usize, labels: &[usize], what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract(format!("{what} split is empty")));
    }
    if n != labels.len() {
        return Err(Error::shape("probe labels", &[n], &[labels.len()]));
    }
    Ok(())
}

/// Tracks the best validation AUC; the first epoch always counts, and
/// later epochs replace it only on a strict improvement.
fn improved(best: Option<f64>, auc: f64) -> bool {
    match best {
        None => true,
        Some(b) => auc > b || (b.is_nan() && !auc.is_nan()),
    }
}

/// Trains a probe on fixed features. The backbone is not involved.
pub fn train_probe_frozen<T: Element>(
    train: &Tensor<T>,
    train_labels: &[usize],
    val: &Tensor<T>,
    val_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit<T>> {
    cfg.validate()?;
    check_labels(train.rows(), train_labels, "train")?;
    let (n, d) = (train.rows(), train.cols());
    let targets = one_hot::<T>(train_labels, classes)?;
    let mut probe = LinearProbe::fitted_to(train, classes, cfg.dropout);
    let standardized = probe.standardize(train);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, [d * classes, classes]);
    let mut best: Option<f64> = None;
    let mut fit = ProbeFit {
        probe: probe.clone(),
        backbone: None,
        best_epoch: 0,
        best_val_auc: f64::NAN,
        train_loss: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[epoch as u64]);
        let mut x = standardized.clone();
        if cfg.dropout > 0.0 {
            let mask = dropout_mask::<T>(&mut rng, n * d, cfg.dropout);
            x.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.param("probe.weight", &probe.weight.clone().with_requires_grad(true));
        let bv = tape.param("probe.bias", &probe.bias.clone().with_requires_grad(true));
        let loss = ce_loss(&mut tape, xv, wv, bv, targets.clone(), n)?;
        tape.backward(loss)?;
        fit.train_loss.push(tape.value(loss).item().as_f64());
        let gw = tape.grad(wv).expect("tracked").to_vec();
        let gb = tape.grad(bv).expect("tracked").to_vec();
        opt.update(0, probe.weight.data_mut(), &gw, cfg.lr)?;
        opt.update(1, probe.bias.data_mut(), &gb, cfg.lr)?;

        let auc = val_auc(&probe, val, val_labels)?;
        if improved(best, auc) || val_labels.is_empty() {
            best = Some(auc);
            fit.probe = probe.clone();
            fit.best_epoch = epoch;
            fit.best_val_auc = auc;
        }
    }
    debug!("probe best epoch {} val auc {:.4}", fit.best_epoch, fit.best_val_auc);
    Ok(fit)
}

/// Jointly fine-tunes a copy of `backbone` and the probe. Each epoch is one
/// full-batch step over all training images.
pub fn train_probe_end_to_end<T: Element>(
    backbone: &ViTModel<T>,
    train: &[Image],
    train_labels: &[usize],
    val: &[Image],
    val_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit<T>> {
    cfg.validate()?;
    check_labels(train.len(), train_labels, "train")?;
    let n = train.len();
    let d = backbone.config().d_model;
    let mut model = backbone.clone();
    model.set_requires_grad(true);
    let mut probe = LinearProbe::fitted_to(&extract_features(&model, train)?, classes, cfg.dropout);
    let shift: Tensor<T> = Tensor::new(vec![1, d], probe.feature_mean.iter().map(|&m| -m).collect())?;
    let inv_std: Tensor<T> = Tensor::new(vec![1, d], probe.feature_inv_std.clone())?;
    let mut probe_opt = Sgd::new(cfg.momentum, cfg.weight_decay, [d * classes, classes]);
    let mut body_opt = Sgd::for_weights(cfg.momentum, cfg.weight_decay, model.weights());
    let targets = one_hot::<T>(train_labels, classes)?;
    let mut best: Option<f64> = None;
    let mut fit = ProbeFit {
        probe: probe.clone(),
        backbone: Some(model.clone()),
        best_epoch: 0,
        best_val_auc: f64::NAN,
        train_loss: Vec::new(),
    };
    let w_leaf = |p: &LinearProbe<T>| p.weight.clone().with_requires_grad(true);
    let b_leaf = |p: &LinearProbe<T>| p.bias.clone().with_requires_grad(true);
    for epoch in 0..cfg.e2e_epochs {
        let mut rng = rng_for(cfg.seed, &[epoch as u64]);
        let mut body_grads = GradBuffer::zeros_like(model.weights());
        let mut gw = vec![T::zero(); d * classes];
        let mut gb = vec![T::zero(); classes];
        let mut loss_sum = 0.0;
        for (i, img) in train.iter().enumerate() {
            let mut tape = Tape::new();
            let bw = model.bind(&mut tape, "backbone.");
            let wv = tape.param("probe.weight", &w_leaf(&probe));
            let bv = tape.param("probe.bias", &b_leaf(&probe));
            let out = model.forward_view(&mut tape, &bw, img)?;
            let sv = tape.constant(shift.clone());
            let iv = tape.constant(inv_std.clone());
            let centered = tape.add_row(out.cls, sv)?;
            let mut feat = tape.mul(centered, iv)?;
            if cfg.dropout > 0.0 {
                let mask = Tensor::new(vec![1, d], dropout_mask::<T>(&mut rng, d, cfg.dropout))?;
                let mv = tape.constant(mask);
                feat = tape.mul(feat, mv)?;
            }
            let row = Tensor::new(vec![1, classes], targets.row(i).to_vec())?;
            let loss = ce_loss(&mut tape, feat, wv, bv, row, n)?;
            loss_sum += tape.value(loss).item().as_f64();
            tape.backward(loss)?;
            body_grads.accumulate(&tape, &bw);
            gw.iter_mut()
                .zip(tape.grad(wv).expect("tracked"))
                .for_each(|(a, &g)| *a += g);
            gb.iter_mut()
                .zip(tape.grad(bv).expect("tracked"))
                .for_each(|(a, &g)| *a += g);
        }
        debug!(
            "end-to-end epoch {epoch} loss {loss_sum:.6} grad norm {:.4}",
            body_grads.norm()
        );
        // the standardizer multiplies backbone gradients by 1/std, which is
        // large for features that barely vary over a small training set
        body_grads.clip(BACKBONE_GRAD_CLIP);
        fit.train_loss.push(loss_sum);
        probe_opt.update(0, probe.weight.data_mut(), &gw, cfg.e2e_lr)?;
        probe_opt.update(1, probe.bias.data_mut(), &gb, cfg.e2e_lr)?;
        body_opt.step_weights(model.weights_mut(), &body_grads, cfg.e2e_lr * cfg.backbone_lr_scale)?;

        let auc = if val.is_empty() {
            f64::NAN
        } else {
            val_auc(&probe, &extract_features(&model, val)?, val_labels)?
        };
        if improved(best, auc) || val.is_empty() {
            best = Some(auc);
            fit.probe = probe.clone();
            fit.backbone = Some(model.clone());
            fit.best_epoch = epoch;
            fit.best_val_auc = auc;
        }
    }
    Ok(fit)
}
