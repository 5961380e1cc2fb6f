use log::{debug, info};
use rand::seq::SliceRandom;

use super::{
    distill_loss_on_tape, ema_update, row_entropy, teacher_probs, update_center, DistillConfig, EmaGranularity,
};
use crate::augment::{make_views, square_resize, standardize_image, ChannelStats, ViewConfig};
use crate::data::{decode_manifest, Manifest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{cosine_lr, GradBuffer, Sgd};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Element, Tape, Tensor};
use crate::vit::{ViTConfig, ViTModel};

const TAG_ORDER: u64 = 1;
const TAG_VIEWS: u64 = 2;

/// Standardized training images plus the statistics used.
#[derive(Debug, Clone)]
pub struct PreparedImages {
    pub images: Vec<Image>,
    pub indices: Vec<usize>,
    pub stats: ChannelStats,
    pub skipped: usize,
}

/// Decodes `manifest`, resizes to `size`, and standardizes with `stats`
/// (computed from these images when `None`).
pub fn prepare_images(
    manifest: &Manifest,
    size: usize,
    channels: usize,
    stats: Option<&ChannelStats>,
) -> Result<PreparedImages> {
    let decoded = decode_manifest(manifest);
    let mut images = decoded
        .images
        .iter()
        .map(|raw| square_resize(raw, size, channels))
        .collect::<Result<Vec<_>>>()?;
    let stats = match stats {
        Some(s) => s.clone(),
        None if images.is_empty() => ChannelStats::identity(channels),
        None => ChannelStats::compute(&images)?,
    };
    for img in &mut images {
        stats.apply(img)?;
    }
    Ok(PreparedImages {
        images,
        indices: decoded.indices,
        stats,
        skipped: decoded.skipped.len(),
    })
}

/// Standardizes a single decoded image the way training images are.
pub fn prepare_one(raw: &crate::data::RawImage, size: usize, stats: &ChannelStats) -> Result<Image> {
    standardize_image(raw, size, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean entropy (nats) of the teacher output rows seen this epoch.
    pub teacher_entropy: f64,
    pub steps: usize,
}

/// Running sums for the epoch in progress.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochAccum {
    pub loss_sum: f64,
    pub steps: u64,
    pub entropy_sum: f64,
    pub entropy_rows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<T: Element = f32> {
    pub distill: DistillConfig,
    pub views: ViewConfig,
    pub stats: ChannelStats,
    pub student: ViTModel<T>,
    pub teacher: ViTModel<T>,
    pub optimizer: Sgd<T>,
    pub center: Vec<T>,
    pub epoch: usize,
    pub step: usize,
    /// Batches finished in the current epoch.
    pub cursor: usize,
    pub accum: EpochAccum,
    pub history: Vec<HistoryRow>,
}

impl<T: Element> TrainerState<T> {
    /// Student initialized from the run seed, teacher an exact copy.
    pub fn new(vit: ViTConfig, distill: DistillConfig, views: ViewConfig, stats: ChannelStats) -> Result<Self> {
        distill.validate()?;
        views.validate()?;
        let student = ViTModel::new(vit, distill.seed)?;
        Self::from_parts(distill, views, stats, student.clone(), student)
    }

    pub fn from_parts(
        distill: DistillConfig,
        views: ViewConfig,
        stats: ChannelStats,
        mut student: ViTModel<T>,
        mut teacher: ViTModel<T>,
    ) -> Result<Self> {
        if student.config() != teacher.config() {
            return Err(Error::Contract("student and teacher configs differ".into()));
        }
        student.set_requires_grad(true);
        teacher.set_requires_grad(false);
        let optimizer = Sgd::for_weights(distill.momentum, distill.weight_decay, student.weights());
        let k = student.config().proto_dim;
        Ok(TrainerState {
            distill,
            views,
            stats,
            student,
            teacher,
            optimizer,
            center: vec![T::zero(); k],
            epoch: 0,
            step: 0,
            cursor: 0,
            accum: EpochAccum::default(),
            history: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.distill.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.distill.epochs
    }

    /// Image order for the current epoch.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(self.distill.seed, &[TAG_ORDER, self.epoch as u64]));
        order
    }

    /// Runs the next batch. Returns the epoch summary when the batch
    /// completed an epoch.
    pub fn train_step(&mut self, images: &[Image]) -> Result<Option<EpochStats>> {
        if images.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let n = images.len();
        let per_epoch = self.steps_per_epoch(n);
        let total = per_epoch * self.distill.epochs;
        let order = self.epoch_order(n);
        let bs = self.distill.batch_size;
        let batch = &order[self.cursor * bs..((self.cursor + 1) * bs).min(n)];
        let scale = 1.0 / batch.len() as f64;
        let cfg = self.distill.clone();
        let centering = cfg.centering.then_some(self.center.as_slice());

        let mut grads = GradBuffer::zeros_like(self.student.weights());
        let mut teacher_rows: Vec<T> = Vec::new();
        let mut loss_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut entropy_rows = 0u64;
        for &idx in batch {
            let seed = derive_seed(cfg.seed, &[TAG_VIEWS, self.epoch as u64, idx as u64]);
            let crops = make_views(&images[idx], &self.views, idx, seed)?;

            let mut probs = Vec::with_capacity(crops.globals.len());
            {
                let mut tape = Tape::<T>::no_grad();
                let tw = self.teacher.bind(&mut tape, "teacher.");
                for g in &crops.globals {
                    let out = self.teacher.forward_view(&mut tape, &tw, g)?;
                    let logits = tape.value(out.logits);
                    teacher_rows.extend_from_slice(logits.data());
                    let p = teacher_probs(logits, cfg.tau_t, centering)?;
                    for h in row_entropy(&p) {
                        entropy_sum += h;
                        entropy_rows += 1;
                    }
                    probs.push(p);
                }
            }

            let mut tape = Tape::<T>::new();
            let sw = self.student.bind(&mut tape, "student.");
            let mut student_logits = Vec::new();
            let student_views = crops
                .locals
                .iter()
                .chain(crops.globals.iter().filter(|_| cfg.student_globals));
            for v in student_views {
                student_logits.push(self.student.forward_view(&mut tape, &sw, v)?.logits);
            }
            let loss = distill_loss_on_tape(&mut tape, &probs, &student_logits, cfg.tau_s)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {} step {}",
                    self.epoch, self.step
                )));
            }
            loss_sum += value;
            let scaled = tape.scale(loss, scale);
            debug_assert!(tape.tracked_leaves().all(|l| l.starts_with("student.")));
            tape.backward(scaled)?;
            grads.accumulate(&tape, &sw);
        }

        grads.clip(cfg.grad_clip);
        let lr = cosine_lr(cfg.lr, cfg.lr_min, self.step, total);
        self.optimizer.step_weights(self.student.weights_mut(), &grads, lr)?;
        if cfg.centering {
            let k = self.center.len();
            let rows = Tensor::new(vec![teacher_rows.len() / k, k], teacher_rows)?;
            update_center(&mut self.center, &rows, cfg.center_momentum)?;
        }
        if cfg.ema_granularity == EmaGranularity::PerStep {
            ema_update(&mut self.teacher, &self.student, cfg.ema_lambda)?;
        }

        let batch_loss = loss_sum * scale;
        self.history.push(HistoryRow {
            epoch: self.epoch,
            step: self.step,
            loss: batch_loss,
        });
        debug!(
            "epoch {} step {} lr {lr:.5} loss {batch_loss:.6}",
            self.epoch, self.step
        );
        self.accum.loss_sum += batch_loss;
        self.accum.steps += 1;
        self.accum.entropy_sum += entropy_sum;
        self.accum.entropy_rows += entropy_rows;
        self.step += 1;
        self.cursor += 1;

        if self.cursor < per_epoch {
            return Ok(None);
        }
        if cfg.ema_granularity == EmaGranularity::PerEpoch {
            ema_update(&mut self.teacher, &self.student, cfg.ema_lambda)?;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: self.accum.loss_sum / self.accum.steps as f64,
            teacher_entropy: self.accum.entropy_sum / self.accum.entropy_rows.max(1) as f64,
            steps: self.accum.steps as usize,
        };
        info!(
            "epoch {} loss {:.5} teacher entropy {:.4}",
            stats.epoch, stats.mean_loss, stats.teacher_entropy
        );
        self.epoch += 1;
        self.cursor = 0;
        self.accum = EpochAccum::default();
        Ok(Some(stats))
    }

    /// Finishes the current epoch (resuming mid-epoch if needed).
    pub fn train_epoch(&mut self, images: &[Image]) -> Result<EpochStats> {
        loop {
            if let Some(stats) = self.train_step(images)? {
                return Ok(stats);
            }
        }
    }

    /// Trains until the configured epoch count, returning every epoch summary.
    pub fn train(&mut self, images: &[Image]) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while !self.finished() {
            out.push(self.train_epoch(images)?);
        }
        Ok(out)
    }
}
