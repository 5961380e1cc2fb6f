//! Command-line stages. Each stage reads the run configuration, does its
//! work, and writes its artifacts under `run_dir`:
//!
//! | stage      | outputs |
//! |------------|---------|
//! | `synth`    | `<data_dir>/{train,val,test}/*.png`, `<data_dir>/manifest.csv` |
//! | `pretrain` | `checkpoint.lsvt`, `loss_history.csv`, `epoch_stats.csv` |
//! | `probe`    | `probe_<dataset>.json` (plus `probe_<dataset>_backbone.json` end to end) |
//! | `eval`     | `eval_report.csv`, `eval_summary.json`, `confusion_<dataset>.csv` |
//! | `ablate`   | `ablation.csv`, `ablation.json` |
//! | `tsne`     | `tsne_<dataset>.{csv,png}`, `tsne_centroids.{csv,png}` |
//! | `attmap`   | `attmap_<dataset>_<i>.{csv,png}` |
//!
//! Every stage also records its resolved configuration in `repro.json`.
//! Exit status is 0 on success, 2 for usage and configuration errors and 1
//! for everything else; failures print one line `error: <kind>: <message>`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::augment::ChannelStats;
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, load_manifest, Manifest, Split};
use crate::distill::checkpoint::{save_checkpoint, Checkpoint};
use crate::distill::{prepare_images, TrainerState};
use crate::error::{Error, Result};
use crate::probe::report::{
    ablation_csv, confusion_csv, eval_report_csv, write_json, write_text, DatasetReport, EvalSummary,
};
use crate::probe::{
    ablation_sweep, extract_features, macro_metrics, stratified_split, train_probe, Labeled, LinearProbe, ProbeData,
    ProbeMode, SplitSpec,
};
use crate::tensor::Tensor;
use crate::vit::{extract_attention_map, ViTConfig, ViTModel};
use crate::viz::{class_centroids, tsne_embed, Embedding2D, TsneConfig};

#[derive(Debug, Parser)]
#[command(
    name = "lsvt",
    version,
    about = "Self-distillation pretraining and linear-probe evaluation"
)]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Debug, Subcommand)]
enum Stage {
    /// Generate the synthetic dataset and its manifest.
    Synth(StageArgs),
    /// Self-distillation pretraining on the train and val splits.
    Pretrain(StageArgs),
    /// Fit a linear probe per dataset on the pretrained teacher.
    Probe(StageArgs),
    /// Score the fitted probes on the test splits.
    Eval(StageArgs),
    /// Label-fraction by dropout by mode sweep.
    Ablate(StageArgs),
    /// t-SNE of teacher embeddings and class centroids.
    Tsne(StageArgs),
    /// Final-layer attention heatmaps of test images.
    Attmap(StageArgs),
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Synth(_) => "synth",
            Stage::Pretrain(_) => "pretrain",
            Stage::Probe(_) => "probe",
            Stage::Eval(_) => "eval",
            Stage::Ablate(_) => "ablate",
            Stage::Tsne(_) => "tsne",
            Stage::Attmap(_) => "attmap",
        }
    }

    fn args(&self) -> &StageArgs {
        match self {
            Stage::Synth(a)
            | Stage::Pretrain(a)
            | Stage::Probe(a)
            | Stage::Eval(a)
            | Stage::Ablate(a)
            | Stage::Tsne(a)
            | Stage::Attmap(a) => a,
        }
    }
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (program name first), runs the stage and returns the exit
/// status.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return 2;
        }
    };
    let args = cli.stage.args();
    let cfg = match RunConfig::load(args.config.as_deref(), &args.set) {
        Ok(c) => c,
        Err(ConfigError::Usage(m)) => {
            eprintln!("error: usage: {}", one_line(&m));
            return 2;
        }
        Err(ConfigError::Invalid(e)) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            return if matches!(e, Error::Config(_)) { 2 } else { 1 };
        }
    };
    match run_stage(&cli.stage, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn run_stage(stage: &Stage, cfg: &RunConfig) -> Result<()> {
    let run = cfg.run_path();
    std::fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
    match stage {
        Stage::Synth(_) => synth(cfg)?,
        Stage::Pretrain(_) => pretrain(cfg)?,
        Stage::Probe(_) => probe(cfg)?,
        Stage::Eval(_) => eval(cfg)?,
        Stage::Ablate(_) => ablate(cfg)?,
        Stage::Tsne(_) => tsne(cfg)?,
        Stage::Attmap(_) => attmap(cfg)?,
    }
    record_repro(cfg, stage.name())
}

#[derive(Debug, Serialize, Deserialize)]
struct ReproRecord {
    version: String,
    seed: u64,
    synth_seed: u64,
    config: toml::Table,
}

/// Merges this stage's record into `repro.json`. No timestamps, so reruns
/// leave the file unchanged.
fn record_repro(cfg: &RunConfig, stage: &str) -> Result<()> {
    let path = cfg.run_path().join("repro.json");
    let mut all: BTreeMap<String, ReproRecord> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    all.insert(
        stage.to_string(),
        ReproRecord {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            synth_seed: cfg.synth_seed,
            config: toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?,
        },
    );
    write_json(&path, &all)
}

/// File-name-safe form of a dataset id.
fn file_id(dataset: &str) -> String {
    dataset
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic();
    let dir = cfg.data_path();
    let manifest = generate_synthetic(&spec, &dir)?;
    info!("wrote {} images and manifest.csv to {}", manifest.len(), dir.display());
    Ok(())
}

struct DatasetSplits {
    dataset: String,
    classes: usize,
    train: Manifest,
    val: Manifest,
    test: Manifest,
}

/// Per dataset: the manifest's split tags when present (carving validation
/// from train if none is tagged), else a stratified split.
fn dataset_splits(manifest: &Manifest, cfg: &RunConfig) -> Result<Vec<DatasetSplits>> {
    let mut out = Vec::new();
    for ds in manifest.datasets() {
        let idx: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.records[i].dataset == ds)
            .collect();
        let sub = manifest.subset(&idx);
        let tagged = sub.records.iter().filter(|r| r.split.is_some()).count();
        let (train, val, test) = if tagged == 0 {
            let [a, b, c] = stratified_split(&sub, &cfg.split())?;
            (a, b, c)
        } else if tagged < sub.len() {
            return Err(Error::Contract(format!(
                "dataset {ds}: split tags on some records only"
            )));
        } else {
            let mut train = sub.with_split(Split::Train);
            let mut val = sub.with_split(Split::Val);
            if val.is_empty() && !train.is_empty() {
                let v = cfg.probe_val_fraction;
                let spec = SplitSpec {
                    fractions: [1.0 - v, v, 0.0],
                    seed: cfg.seed,
                    stratified: cfg.stratified,
                };
                let [a, b, _] = stratified_split(&train, &spec)?;
                train = a;
                val = b;
            }
            (train, val, sub.with_split(Split::Test))
        };
        out.push(DatasetSplits {
            classes: manifest.class_count(&ds),
            dataset: ds,
            train,
            val,
            test,
        });
    }
    Ok(out)
}

fn load_splits(cfg: &RunConfig) -> Result<Vec<DatasetSplits>> {
    let manifest = load_manifest(&cfg.manifest_path())?;
    if manifest.is_empty() {
        return Err(Error::Contract("manifest has no records".into()));
    }
    dataset_splits(&manifest, cfg)
}

/// Every train and validation record, in dataset order. Labels are never
/// read; only test images are held out.
fn pretrain_manifest(splits: &[DatasetSplits]) -> Manifest {
    let mut m = splits[0].train.clone();
    m.records.clear();
    for s in splits {
        m.records.extend(s.train.records.iter().cloned());
        m.records.extend(s.val.records.iter().cloned());
    }
    m
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint.
fn save_atomic(state: &TrainerState<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("lsvt.tmp");
    save_checkpoint(state, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let train_m = pretrain_manifest(&splits);
    let ckpt_path = cfg.checkpoint_path();
    let stats_path = cfg.run_path().join("epoch_stats.csv");

    let resumed = cfg.resume && ckpt_path.exists();
    let (mut state, images) = if resumed {
        let state = Checkpoint::read(&ckpt_path)?.into_state::<f32>()?;
        let differs = [
            ("model", cfg.vit()? != *state.student.config()),
            ("views", cfg.views()? != state.views),
            ("distillation", cfg.distill()? != state.distill),
        ];
        if let Some((what, _)) = differs.iter().find(|(_, d)| *d) {
            return Err(Error::Config(format!(
                "cannot resume: {what} settings differ from the checkpoint at {}",
                ckpt_path.display()
            )));
        }
        let v = state.student.config();
        let prepared = prepare_images(&train_m, v.image_size, v.channels, Some(&state.stats))?;
        info!("resuming at epoch {} step {}", state.epoch, state.step);
        (state, prepared.images)
    } else {
        let vit = cfg.vit()?;
        let prepared = prepare_images(&train_m, vit.image_size, vit.channels, None)?;
        let state = TrainerState::<f32>::new(vit, cfg.distill()?, cfg.views()?, prepared.stats.clone())?;
        (state, prepared.images)
    };
    if images.is_empty() {
        return Err(Error::Contract("no decodable training images".into()));
    }
    info!(
        "pretraining on {} images, {} parameters",
        images.len(),
        state.student.param_count()
    );

    let mut lines: Vec<String> = match (resumed, std::fs::read_to_string(&stats_path)) {
        (true, Ok(text)) => text
            .lines()
            .skip(1)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_some_and(|e| e < state.epoch)
            })
            .map(String::from)
            .collect(),
        _ => Vec::new(),
    };
    let mut ran = 0;
    while !state.finished() && (cfg.max_epochs_per_run == 0 || ran < cfg.max_epochs_per_run) {
        ran += 1;
        let s = state.train_epoch(&images)?;
        lines.push(format!(
            "{},{},{:.9},{:.9}",
            s.epoch, s.steps, s.mean_loss, s.teacher_entropy
        ));
        save_atomic(&state, &ckpt_path)?;
    }
    if !ckpt_path.exists() {
        save_atomic(&state, &ckpt_path)?;
    }

    let mut history = String::from("epoch,step,loss\n");
    for h in &state.history {
        history.push_str(&format!("{},{},{:.9}\n", h.epoch, h.step, h.loss));
    }
    write_text(&cfg.run_path().join("loss_history.csv"), &history)?;
    let mut text = String::from("epoch,steps,mean_loss,teacher_entropy\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    write_text(&stats_path, &text)
}

/// Teacher backbone and data statistics of the pretrained checkpoint.
struct Pretrained {
    teacher: ViTModel<f32>,
    stats: ChannelStats,
}

impl Pretrained {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(&cfg.checkpoint_path())?;
        Ok(Pretrained {
            teacher: ckpt.model("teacher.")?,
            stats: ckpt.stats()?,
        })
    }

    fn vit(&self) -> &ViTConfig {
        self.teacher.config()
    }

    fn labeled(&self, m: &Manifest) -> Result<Labeled> {
        if m.is_empty() {
            return Ok(Labeled::default());
        }
        let p = prepare_images(m, self.vit().image_size, self.vit().channels, Some(&self.stats))?;
        Ok(Labeled {
            labels: p.indices.iter().map(|&i| m.records[i].label).collect(),
            images: p.images,
        })
    }

    fn probe_data(&self, s: &DatasetSplits) -> Result<ProbeData> {
        Ok(ProbeData {
            dataset: s.dataset.clone(),
            classes: s.classes,
            train: self.labeled(&s.train)?,
            val: self.labeled(&s.val)?,
            test: self.labeled(&s.test)?,
        })
    }
}

/// A fitted probe as stored between the `probe` and `eval` stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeFile {
    dataset: String,
    classes: usize,
    mode: ProbeMode,
    best_epoch: usize,
    val_auc: f64,
    dropout: f64,
    weight: Vec<f32>,
    bias: Vec<f32>,
    feature_mean: Vec<f32>,
    feature_inv_std: Vec<f32>,
    /// File holding the fine-tuned backbone (end-to-end mode).
    backbone: Option<String>,
}

impl ProbeFile {
    fn probe(&self) -> Result<LinearProbe<f32>> {
        let d = self.feature_mean.len();
        Ok(LinearProbe {
            weight: Tensor::new(vec![d, self.classes], self.weight.clone())?,
            bias: Tensor::new(vec![self.classes], self.bias.clone())?,
            feature_mean: self.feature_mean.clone(),
            feature_inv_std: self.feature_inv_std.clone(),
            dropout: self.dropout,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredWeights {
    config: ViTConfig,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn save_backbone(model: &ViTModel<f32>, path: &Path) -> Result<()> {
    let tensors = model
        .weights()
        .leaves()
        .into_iter()
        .map(|(name, t)| (name, (t.shape().to_vec(), t.data().to_vec())))
        .collect();
    let stored = StoredWeights {
        config: model.config().clone(),
        tensors,
    };
    write_text(path, &serde_json::to_string(&stored)?)
}

fn load_backbone(path: &Path) -> Result<ViTModel<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: StoredWeights = serde_json::from_str(&text)?;
    ViTModel::from_named(stored.config, |name| {
        stored
            .tensors
            .get(name)
            .and_then(|(shape, data)| Tensor::new(shape.clone(), data.clone()).ok())
    })
}

fn probe(cfg: &RunConfig) -> Result<()> {
    let pre = Pretrained::load(cfg)?;
    let mode = cfg.probe_mode()?;
    let probe_cfg = cfg.probe()?;
    for s in load_splits(cfg)? {
        let data = pre.probe_data(&s)?;
        let fit = train_probe(&pre.teacher, &data, mode, &probe_cfg)?;
        let id = file_id(&s.dataset);
        let backbone = match &fit.backbone {
            Some(model) => {
                let name = format!("probe_{id}_backbone.json");
                save_backbone(model, &cfg.run_path().join(&name))?;
                Some(name)
            }
            None => None,
        };
        info!(
            "{}: best epoch {} val auc {:.4}",
            s.dataset, fit.best_epoch, fit.best_val_auc
        );
        let file = ProbeFile {
            dataset: s.dataset.clone(),
            classes: s.classes,
            mode,
            best_epoch: fit.best_epoch,
            val_auc: fit.best_val_auc,
            dropout: fit.probe.dropout,
            weight: fit.probe.weight.data().to_vec(),
            bias: fit.probe.bias.data().to_vec(),
            feature_mean: fit.probe.feature_mean.clone(),
            feature_inv_std: fit.probe.feature_inv_std.clone(),
            backbone,
        };
        write_json(&cfg.run_path().join(format!("probe_{id}.json")), &file)?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let pre = Pretrained::load(cfg)?;
    let mut reports = Vec::new();
    for s in load_splits(cfg)? {
        let id = file_id(&s.dataset);
        let path = cfg.run_path().join(format!("probe_{id}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ProbeFile = serde_json::from_str(&text)?;
        let tuned = match &file.backbone {
            Some(name) => Some(load_backbone(&cfg.run_path().join(name))?),
            None => None,
        };
        let model = tuned.as_ref().unwrap_or(&pre.teacher);
        let test = pre.labeled(&s.test)?;
        if test.is_empty() {
            return Err(Error::Contract(format!("dataset {}: test split is empty", s.dataset)));
        }
        let probs = file.probe()?.predict(&extract_features(model, &test.images)?)?;
        let metrics = macro_metrics(&probs, &test.labels)?;
        info!(
            "{}: test auc {:.4} accuracy {:.4}",
            s.dataset, metrics.auc, metrics.accuracy
        );
        write_text(
            &cfg.run_path().join(format!("confusion_{id}.csv")),
            &confusion_csv(&metrics),
        )?;
        reports.push(DatasetReport {
            dataset: s.dataset.clone(),
            classes: s.classes,
            mode: file.mode.as_str().into(),
            best_epoch: file.best_epoch,
            val_auc: file.val_auc,
            test: metrics,
        });
    }
    write_text(&cfg.run_path().join("eval_report.csv"), &eval_report_csv(&reports))?;
    write_json(
        &cfg.run_path().join("eval_summary.json"),
        &EvalSummary { datasets: reports },
    )
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let pre = Pretrained::load(cfg)?;
    let grid = cfg.grid()?;
    let probe_cfg = cfg.probe()?;
    let mut cells = Vec::new();
    for s in load_splits(cfg)? {
        let data = pre.probe_data(&s)?;
        cells.extend(ablation_sweep(&pre.teacher, &data, &grid, &probe_cfg)?);
    }
    write_text(&cfg.run_path().join("ablation.csv"), &ablation_csv(&cells))?;
    write_json(&cfg.run_path().join("ablation.json"), &cells)
}

/// Largest usable perplexity for `n` points, capped at the configured one.
fn fit_perplexity(configured: f64, n: usize) -> f64 {
    configured.min(((n.saturating_sub(1)) as f64 / 3.0).max(2.0))
}

fn write_embedding(cfg: &RunConfig, stem: &str, e: &Embedding2D) -> Result<()> {
    write_text(&cfg.run_path().join(format!("{stem}.csv")), &e.to_csv())?;
    e.write_png(&cfg.run_path().join(format!("{stem}.png")), cfg.tsne_png_size)
}

fn tsne(cfg: &RunConfig) -> Result<()> {
    let pre = Pretrained::load(cfg)?;
    let base = cfg.tsne();
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut centroid_meta: Vec<(String, usize)> = Vec::new();
    for s in load_splits(cfg)? {
        let mut all = s.train.clone();
        all.records.extend(s.val.records.iter().cloned());
        all.records.extend(s.test.records.iter().cloned());
        if all.len() > cfg.tsne_max_points {
            return Err(Error::Domain(format!(
                "dataset {} has {} images, above tsne_max_points {}",
                s.dataset,
                all.len(),
                cfg.tsne_max_points
            )));
        }
        let data = pre.labeled(&all)?;
        if data.len() < 2 {
            warn!("{}: fewer than two images, no t-SNE", s.dataset);
            continue;
        }
        let features = extract_features(&pre.teacher, &data.images)?;
        let run = tsne_embed(
            &features,
            &TsneConfig {
                perplexity: fit_perplexity(base.perplexity, data.len()),
                ..base.clone()
            },
        )?;
        let e = Embedding2D::new(run.points, vec![s.dataset.clone(); data.len()], data.labels.clone())?;
        write_embedding(cfg, &format!("tsne_{}", file_id(&s.dataset)), &e)?;

        let present: Vec<usize> = {
            let mut l = data.labels.clone();
            l.sort_unstable();
            l.dedup();
            l
        };
        // remap to dense ids so absent classes do not count as empty
        let dense: Vec<usize> = data
            .labels
            .iter()
            .map(|l| present.binary_search(l).expect("present"))
            .collect();
        let c = class_centroids(&features, &dense)?;
        for (k, &label) in present.iter().enumerate() {
            centroids.push(c.row(k).to_vec());
            centroid_meta.push((s.dataset.clone(), label));
        }
    }
    if centroids.len() >= 2 {
        let x = Tensor::<f64>::from_rows(&centroids)?;
        let run = tsne_embed(
            &x,
            &TsneConfig {
                perplexity: fit_perplexity(base.perplexity, centroids.len()),
                ..base
            },
        )?;
        let (datasets, classes) = centroid_meta.into_iter().unzip();
        write_embedding(cfg, "tsne_centroids", &Embedding2D::new(run.points, datasets, classes)?)?;
    } else {
        warn!("fewer than two class centroids, no centroid plot");
    }
    Ok(())
}

fn attmap(cfg: &RunConfig) -> Result<()> {
    let pre = Pretrained::load(cfg)?;
    for s in load_splits(cfg)? {
        let source = if s.test.is_empty() { &s.train } else { &s.test };
        let take: Vec<usize> = (0..source.len().min(cfg.attmap_count)).collect();
        let data = pre.labeled(&source.subset(&take))?;
        for (i, img) in data.images.iter().enumerate() {
            let map = extract_attention_map(&pre.teacher, img)?;
            let stem = cfg.run_path().join(format!("attmap_{}_{i}", file_id(&s.dataset)));
            map.write_csv(&stem.with_extension("csv"))?;
            map.write_png(&stem.with_extension("png"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["lsvt", "bogus"]), 2);
        assert_eq!(run_cli(["lsvt", "synth", "--set", "nope=1"]), 2);
        assert_eq!(run_cli(["lsvt", "pretrain", "--set", "tau_t=-1"]), 2);
        assert_eq!(run_cli(["lsvt", "--help"]), 0);
    }

    #[test]
    fn missing_manifest_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let run = format!("run_dir={}", dir.path().display());
        assert_eq!(run_cli(["lsvt", "pretrain", "--set", run.as_str()]), 1);
    }

    #[test]
    fn file_ids_are_safe() {
        assert_eq!(file_id("a b/c"), "a_b_c");
        assert_eq!(fit_perplexity(30.0, 250), 30.0);
        assert_eq!(fit_perplexity(30.0, 4), 2.0);
    }
}
