//! Flat run configuration shared by every CLI stage.
//!
//! The file is a TOML document of top-level keys only. Every key has a
//! default, unknown keys are rejected, and `--set key=value` overrides are
//! applied on top of the file before validation. Model shape keys default to
//! 0 (or 0.0), which means "take the value from `preset`". Empty path keys
//! resolve relative to `run_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{Photometric, ViewConfig, ViewKind, ViewSpec};
use crate::data::{ClassParams, SyntheticSpec};
use crate::distill::{DistillConfig, EmaGranularity};
use crate::error::{Error, Result};
use crate::probe::{AblationGrid, ProbeConfig, ProbeMode, SplitSpec};
use crate::vit::ViTConfig;
use crate::viz::TsneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: String,
    /// Synthetic data output directory; default `<run_dir>/data`.
    pub data_dir: String,
    /// Manifest read by every stage after `synth`; default `<data_dir>/manifest.csv`.
    pub manifest: String,
    /// Default `<run_dir>/checkpoint.lsvt`.
    pub checkpoint: String,
    /// Seed of pretraining, splits, probes and t-SNE.
    pub seed: u64,

    pub synth_image_size: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub synth_noise: f32,
    pub synth_seed: u64,
    pub synth_dataset: String,
    /// Lesion blobs of class 1; class 0 has none.
    pub synth_blobs: usize,
    pub synth_blob_intensity: f32,

    /// `tiny`, `deit-b` or its alias `paper`.
    pub preset: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub head_hidden: usize,
    pub proto_dim: usize,

    pub global_crops: usize,
    pub global_scale_min: f64,
    pub global_scale_max: f64,
    pub local_crops: usize,
    pub local_scale_min: f64,
    pub local_scale_max: f64,
    /// Local crop side; 0 means half the image size.
    pub local_size: usize,
    pub p_flip: f64,
    pub p_gray: f64,
    pub color_jitter: bool,
    pub blur: bool,

    pub tau_t: f64,
    pub tau_s: f64,
    pub ema_lambda: f64,
    /// `per-epoch` or `per-step`.
    pub ema_granularity: String,
    pub centering: bool,
    pub center_momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Max global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub student_globals: bool,
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop after this many epochs in one invocation; 0 means no limit.
    /// Pair with `resume` to train in slices.
    pub max_epochs_per_run: usize,

    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub stratified: bool,
    /// Share of the train split moved to validation when a manifest tags
    /// train and test records but no validation records.
    pub probe_val_fraction: f64,

    /// `frozen` or `end_to_end`.
    pub probe_mode: String,
    pub probe_epochs: usize,
    pub probe_e2e_epochs: usize,
    pub probe_lr: f64,
    pub probe_e2e_lr: f64,
    pub probe_backbone_lr_scale: f64,
    pub probe_momentum: f64,
    pub probe_weight_decay: f64,
    pub probe_dropout: f64,

    pub ablate_fractions: Vec<f64>,
    pub ablate_dropouts: Vec<f64>,
    pub ablate_modes: Vec<String>,

    pub tsne_perplexity: f64,
    pub tsne_learning_rate: f64,
    pub tsne_iterations: usize,
    pub tsne_exaggeration: f64,
    pub tsne_exaggeration_iters: usize,
    pub tsne_init_std: f64,
    pub tsne_max_points: usize,
    pub tsne_png_size: usize,

    /// Test images per dataset rendered by `attmap`.
    pub attmap_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let views = ViewConfig::for_size(32);
        let distill = DistillConfig::default();
        let split = SplitSpec::default();
        let probe = ProbeConfig::default();
        let grid = AblationGrid::default();
        let tsne = TsneConfig::default();
        RunConfig {
            run_dir: "run".into(),
            data_dir: String::new(),
            manifest: String::new(),
            checkpoint: String::new(),
            seed: 0,

            synth_image_size: synth.image_size,
            synth_train: synth.train,
            synth_val: synth.val,
            synth_test: synth.test,
            synth_noise: synth.noise,
            synth_seed: synth.seed,
            synth_dataset: synth.dataset.clone(),
            synth_blobs: synth.classes[1].blobs,
            synth_blob_intensity: synth.classes[1].blob_intensity,

            preset: "tiny".into(),
            image_size: 0,
            patch_size: 0,
            channels: 0,
            depth: 0,
            d_model: 0,
            heads: 0,
            mlp_ratio: 0.0,
            head_hidden: 0,
            proto_dim: 0,

            global_crops: views.global.count,
            global_scale_min: views.global.scale.0,
            global_scale_max: views.global.scale.1,
            local_crops: views.local.count,
            local_scale_min: views.local.scale.0,
            local_scale_max: views.local.scale.1,
            local_size: 0,
            p_flip: views.photometric.p_flip,
            p_gray: views.photometric.p_gray,
            color_jitter: views.photometric.color_jitter,
            blur: views.photometric.blur,

            tau_t: distill.tau_t,
            tau_s: distill.tau_s,
            ema_lambda: distill.ema_lambda,
            ema_granularity: "per-epoch".into(),
            centering: distill.centering,
            center_momentum: distill.center_momentum,
            epochs: distill.epochs,
            batch_size: distill.batch_size,
            lr: distill.lr,
            lr_min: distill.lr_min,
            momentum: distill.momentum,
            weight_decay: distill.weight_decay,
            grad_clip: distill.grad_clip,
            student_globals: distill.student_globals,
            resume: false,
            max_epochs_per_run: 0,

            split_train: split.fractions[0],
            split_val: split.fractions[1],
            split_test: split.fractions[2],
            stratified: split.stratified,
            probe_val_fraction: 0.25,

            probe_mode: ProbeMode::Frozen.as_str().into(),
            probe_epochs: probe.epochs,
            probe_e2e_epochs: probe.e2e_epochs,
            probe_lr: probe.lr,
            probe_e2e_lr: probe.e2e_lr,
            probe_backbone_lr_scale: probe.backbone_lr_scale,
            probe_momentum: probe.momentum,
            probe_weight_decay: probe.weight_decay,
            probe_dropout: probe.dropout,

            ablate_fractions: grid.fractions,
            ablate_dropouts: grid.dropouts,
            ablate_modes: grid.modes.iter().map(|m| m.as_str().to_string()).collect(),

            tsne_perplexity: tsne.perplexity,
            tsne_learning_rate: tsne.learning_rate,
            tsne_iterations: tsne.iterations,
            tsne_exaggeration: tsne.exaggeration,
            tsne_exaggeration_iters: tsne.exaggeration_iters,
            tsne_init_std: tsne.init_std,
            tsne_max_points: 2000,
            tsne_png_size: 512,

            attmap_count: 4,
        }
    }
}

/// Failure to assemble a configuration: a usage problem (unknown key,
/// malformed override) or an invalid value.
#[derive(Debug)]
pub enum ConfigError {
    Usage(String),
    Invalid(Error),
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        ConfigError::Invalid(e)
    }
}

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize to a table")
}

/// Names of every configuration key, in declaration order.
pub fn known_keys() -> Vec<String> {
    let text = toml::to_string(&RunConfig::default()).expect("defaults serialize");
    text.lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.trim().to_string()))
        .collect()
}

/// Parses an override value with the type of the key's default: strings are
/// taken verbatim, everything else as a TOML value.
fn parse_override(key: &str, raw: &str, defaults: &toml::Table) -> std::result::Result<toml::Value, ConfigError> {
    match defaults.get(key) {
        None => Err(ConfigError::Usage(format!("unknown config key {key:?}"))),
        Some(toml::Value::String(_)) => Ok(toml::Value::String(raw.to_string())),
        Some(_) => {
            let doc: toml::Table = format!("v = {raw}")
                .parse()
                .map_err(|_| ConfigError::Usage(format!("cannot parse value {raw:?} for {key}")))?;
            Ok(doc["v"].clone())
        }
    }
}

impl RunConfig {
    /// Builds a configuration from optional file text and `key=value`
    /// overrides, then validates it.
    pub fn assemble(file: Option<&str>, overrides: &[String]) -> std::result::Result<Self, ConfigError> {
        let defaults = default_table();
        let mut table = match file {
            Some(text) => text
                .parse::<toml::Table>()
                .map_err(|e| ConfigError::Usage(format!("config file: {}", first_line(&e.to_string()))))?,
            None => toml::Table::new(),
        };
        if let Some(k) = table.keys().find(|k| !defaults.contains_key(*k)) {
            return Err(ConfigError::Usage(format!("unknown config key {k:?}")));
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Usage(format!("override {item:?} is not key=value")))?;
            let k = k.trim();
            table.insert(k.to_string(), parse_override(k, v.trim(), &defaults)?);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(Error::Config(first_line(&e.to_string()))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> std::result::Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Invalid(Error::io(p, e)))?),
            None => None,
        };
        Self::assemble(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_dir.is_empty() {
            return Err(Error::Config("run_dir must not be empty".into()));
        }
        self.vit()?.validate()?;
        self.views()?.validate()?;
        self.distill()?.validate()?;
        self.split().validate()?;
        self.probe()?.validate()?;
        self.tsne().validate()?;
        self.grid()?;
        if !(self.probe_val_fraction > 0.0 && self.probe_val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "probe_val_fraction {} outside (0, 1)",
                self.probe_val_fraction
            )));
        }
        if self.tsne_png_size < 8 {
            return Err(Error::Config("tsne_png_size below 8".into()));
        }
        Ok(())
    }

    pub fn run_path(&self) -> PathBuf {
        PathBuf::from(&self.run_dir)
    }

    pub fn data_path(&self) -> PathBuf {
        if self.data_dir.is_empty() {
            self.run_path().join("data")
        } else {
            PathBuf::from(&self.data_dir)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.is_empty() {
            self.data_path().join("manifest.csv")
        } else {
            PathBuf::from(&self.manifest)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.run_path().join("checkpoint.lsvt")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec {
            image_size: self.synth_image_size,
            noise: self.synth_noise,
            seed: self.synth_seed,
            train: self.synth_train,
            val: self.synth_val,
            test: self.synth_test,
            dataset: self.synth_dataset.clone(),
            ..SyntheticSpec::default()
        };
        spec.classes[1] = ClassParams {
            blobs: self.synth_blobs,
            blob_intensity: self.synth_blob_intensity,
            ..spec.classes[1].clone()
        };
        spec
    }

    pub fn vit(&self) -> Result<ViTConfig> {
        let preset = if self.preset == "paper" {
            "deit-b"
        } else {
            self.preset.as_str()
        };
        let mut v = ViTConfig::preset(preset)?;
        let pick = |field: &mut usize, value: usize| {
            if value != 0 {
                *field = value;
            }
        };
        pick(&mut v.image_size, self.image_size);
        pick(&mut v.patch_size, self.patch_size);
        pick(&mut v.channels, self.channels);
        pick(&mut v.depth, self.depth);
        pick(&mut v.d_model, self.d_model);
        pick(&mut v.heads, self.heads);
        pick(&mut v.head_hidden, self.head_hidden);
        pick(&mut v.proto_dim, self.proto_dim);
        if self.mlp_ratio != 0.0 {
            v.mlp_ratio = self.mlp_ratio;
        }
        Ok(v)
    }

    pub fn views(&self) -> Result<ViewConfig> {
        let size = self.vit()?.image_size;
        Ok(ViewConfig {
            global: ViewSpec {
                kind: ViewKind::Global,
                count: self.global_crops,
                scale: (self.global_scale_min, self.global_scale_max),
                size,
            },
            local: ViewSpec {
                kind: ViewKind::Local,
                count: self.local_crops,
                scale: (self.local_scale_min, self.local_scale_max),
                size: if self.local_size == 0 {
                    size / 2
                } else {
                    self.local_size
                },
            },
            photometric: Photometric {
                p_flip: self.p_flip,
                p_gray: self.p_gray,
                color_jitter: self.color_jitter,
                blur: self.blur,
            },
        })
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        let ema_granularity = match self.ema_granularity.as_str() {
            "per-epoch" => EmaGranularity::PerEpoch,
            "per-step" => EmaGranularity::PerStep,
            other => {
                return Err(Error::Config(format!(
                    "ema_granularity {other:?} is not per-epoch or per-step"
                )))
            }
        };
        Ok(DistillConfig {
            tau_t: self.tau_t,
            tau_s: self.tau_s,
            ema_lambda: self.ema_lambda,
            ema_granularity,
            centering: self.centering,
            center_momentum: self.center_momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            student_globals: self.student_globals,
            seed: self.seed,
        })
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            fractions: [self.split_train, self.split_val, self.split_test],
            seed: self.seed,
            stratified: self.stratified,
        }
    }

    pub fn probe_mode(&self) -> Result<ProbeMode> {
        parse_mode(&self.probe_mode)
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        self.probe_mode()?;
        Ok(ProbeConfig {
            epochs: self.probe_epochs,
            e2e_epochs: self.probe_e2e_epochs,
            lr: self.probe_lr,
            e2e_lr: self.probe_e2e_lr,
            backbone_lr_scale: self.probe_backbone_lr_scale,
            momentum: self.probe_momentum,
            weight_decay: self.probe_weight_decay,
            dropout: self.probe_dropout,
            seed: self.seed,
        })
    }

    pub fn grid(&self) -> Result<AblationGrid> {
        for &f in &self.ablate_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("label fraction {f} outside (0, 1]")));
            }
        }
        for &d in &self.ablate_dropouts {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("dropout {d} outside [0, 1)")));
            }
        }
        Ok(AblationGrid {
            fractions: self.ablate_fractions.clone(),
            dropouts: self.ablate_dropouts.clone(),
            modes: self.ablate_modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?,
        })
    }

    pub fn tsne(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            learning_rate: self.tsne_learning_rate,
            iterations: self.tsne_iterations,
            exaggeration: self.tsne_exaggeration,
            exaggeration_iters: self.tsne_exaggeration_iters,
            init_std: self.tsne_init_std,
            seed: self.seed,
        }
    }
}

fn parse_mode(s: &str) -> Result<ProbeMode> {
    match s {
        "frozen" => Ok(ProbeMode::Frozen),
        "end_to_end" => Ok(ProbeMode::EndToEnd),
        other => Err(Error::Config(format!(
            "probe mode {other:?} is not frozen or end_to_end"
        ))),
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}
