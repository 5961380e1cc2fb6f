//! Stage-two evaluation: splits, linear probes, metrics and ablations.

pub mod linear;
pub mod metrics;
pub mod report;
pub mod split;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::derive_seed;
use crate::tensor::{Element, Tensor};
use crate::vit::ViTModel;

pub use linear::{
    ce_loss, extract_features, train_probe_end_to_end, train_probe_frozen, LinearProbe, ProbeConfig, ProbeFit,
    ProbeMode,
};
pub use metrics::{argmax, macro_metrics, roc_auc_binary, Metrics};
pub use split::{largest_remainder, split_indices, stratified_split, subsample_indices, SplitSpec};

/// Images and labels of one split.
#[derive(Debug, Clone, Default)]
pub struct Labeled {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Labeled {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Labeled {
        Labeled {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeData {
    pub dataset: String,
    pub classes: usize,
    pub train: Labeled,
    pub val: Labeled,
    pub test: Labeled,
}

/// Trains a probe on `backbone`'s features. Frozen mode reads the backbone
/// only; end-to-end mode fine-tunes a copy.
pub fn train_probe<T: Element>(
    backbone: &ViTModel<T>,
    data: &ProbeData,
    mode: ProbeMode,
    cfg: &ProbeConfig,
) -> Result<ProbeFit<T>> {
    match mode {
        ProbeMode::Frozen => {
            let train = extract_features(backbone, &data.train.images)?;
            let val = features_or_empty(backbone, &data.val.images)?;
            train_probe_frozen(&train, &data.train.labels, &val, &data.val.labels, data.classes, cfg)
        }
        ProbeMode::EndToEnd => train_probe_end_to_end(
            backbone,
            &data.train.images,
            &data.train.labels,
            &data.val.images,
            &data.val.labels,
            data.classes,
            cfg,
        ),
    }
}

fn features_or_empty<T: Element>(model: &ViTModel<T>, images: &[Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        // a 1×d placeholder never read because the label list is empty
        return Ok(Tensor::zeros(vec![1, model.config().d_model]));
    }
    extract_features(model, images)
}

/// Test-split metrics of a fitted probe.
pub fn evaluate<T: Element>(backbone: &ViTModel<T>, fit: &ProbeFit<T>, test: &Labeled) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Contract("test split is empty".into()));
    }
    let model = fit.backbone.as_ref().unwrap_or(backbone);
    let probs = fit.probe.predict(&extract_features(model, &test.images)?)?;
    macro_metrics(&probs, &test.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub fractions: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub modes: Vec<ProbeMode>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            fractions: vec![0.065, 0.10, 0.25, 0.50, 0.75, 1.0],
            dropouts: vec![0.0, 0.1, 0.2, 0.5],
            modes: vec![ProbeMode::Frozen, ProbeMode::EndToEnd],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dataset: String,
    pub fraction: f64,
    pub dropout: f64,
    pub mode: ProbeMode,
    /// `None` when the fraction leaves some class without samples.
    pub train_n: Option<usize>,
    pub best_epoch: Option<usize>,
    pub val_auc: Option<f64>,
    pub test: Option<Metrics>,
}

/// Every (fraction, dropout, mode) cell: subsample the train split per class
/// at the fraction, fit a probe, score on the untouched test split.
pub fn ablation_sweep<T: Element>(
    backbone: &ViTModel<T>,
    data: &ProbeData,
    grid: &AblationGrid,
    cfg: &ProbeConfig,
) -> Result<Vec<AblationCell>> {
    let frozen_needed = grid.modes.contains(&ProbeMode::Frozen);
    let cache = if frozen_needed {
        Some((
            extract_features(backbone, &data.train.images)?,
            features_or_empty(backbone, &data.val.images)?,
            extract_features(backbone, &data.test.images)?,
        ))
    } else {
        None
    };
    let mut cells = Vec::new();
    for (fi, &fraction) in grid.fractions.iter().enumerate() {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
        }
        let keep = subsample_indices(
            &data.train.labels,
            fraction,
            derive_seed(cfg.seed, &[0xab1a, fi as u64]),
        );
        for &dropout in &grid.dropouts {
            for &mode in &grid.modes {
                let mut cell = AblationCell {
                    dataset: data.dataset.clone(),
                    fraction,
                    dropout,
                    mode,
                    train_n: None,
                    best_epoch: None,
                    val_auc: None,
                    test: None,
                };
                let Some(keep) = keep.as_ref() else {
                    info!("{} fraction {fraction}: a class vanishes, cell skipped", data.dataset);
                    cells.push(cell);
                    continue;
                };
                let cell_cfg = ProbeConfig { dropout, ..cfg.clone() };
                let train = data.train.subset(keep);
                let (fit, metrics) = match mode {
                    ProbeMode::Frozen => {
                        let (tf, vf, sf) = cache.as_ref().expect("frozen features cached");
                        let rows = select_rows(tf, keep)?;
                        let fit =
                            train_probe_frozen(&rows, &train.labels, vf, &data.val.labels, data.classes, &cell_cfg)?;
                        let m = macro_metrics(&fit.probe.predict(sf)?, &data.test.labels)?;
                        (fit, m)
                    }
                    ProbeMode::EndToEnd => {
                        let sub = ProbeData { train, ..data.clone() };
                        let fit = train_probe(backbone, &sub, mode, &cell_cfg)?;
                        let m = evaluate(backbone, &fit, &data.test)?;
                        (fit, m)
                    }
                };
                info!(
                    "{} fraction {fraction} dropout {dropout} {}: test auc {:.4}",
                    data.dataset,
                    mode.as_str(),
                    metrics.auc
                );
                cell.train_n = Some(keep.len());
                cell.best_epoch = Some(fit.best_epoch);
                cell.val_auc = Some(fit.best_val_auc);
                cell.test = Some(metrics);
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

fn select_rows<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let d = t.cols();
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data)
}
