//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "LSVT"  u32 version
//! u32 n   config JSON (n bytes, UTF-8)
//! u32 count, then per tensor:
//!         u32 n, name (n bytes)  u8 dtype (1 = f32, 2 = f64)
//!         u32 ndim, u32 dims[ndim], raw values
//! u8 dtype, u32 K, center values
//! u64 epoch, u64 step, u64 cursor, u64 accum_steps, u64 accum_rows
//! f64 accum_loss, f64 accum_entropy
//! ```
//!
//! Tensor names: `student.*`, `teacher.*`, `optim.momentum.*`, `data.mean`,
//! `data.std` and, once training has started, `history` (`n × 3` f64 rows of
//! epoch, step, loss).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{EpochAccum, HistoryRow, TrainerState};
use super::DistillConfig;
use crate::augment::{ChannelStats, ViewConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"LSVT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub vit: ViTConfig,
    pub distill: DistillConfig,
    pub views: ViewConfig,
}

/// A tensor as stored, in its own precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub center: StoredTensor,
    pub counters: [u64; 5],
    pub accum: [f64; 2],
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Element>(state: &TrainerState<T>) -> Result<Vec<u8>> {
    let config = CheckpointConfig {
        vit: state.student.config().clone(),
        distill: state.distill.clone(),
        views: state.views.clone(),
    };
    let json = serde_json::to_vec(&config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let mut table: Vec<(String, Vec<u8>)> = Vec::new();
    let mut push = |name: String, bytes: Vec<u8>| table.push((name, bytes));
    let tensor_bytes = |name: &str, t: &Tensor<T>| {
        let mut b = Vec::new();
        put_tensor(&mut b, name, t);
        b
    };
    for (prefix, model) in [("student.", &state.student), ("teacher.", &state.teacher)] {
        for (name, t) in model.weights().leaves() {
            let full = format!("{prefix}{name}");
            push(full.clone(), tensor_bytes(&full, t));
        }
    }
    for ((name, t), buf) in state.student.weights().leaves().iter().zip(&state.optimizer.buffers) {
        let full = format!("optim.momentum.{name}");
        let m = Tensor::new(t.shape().to_vec(), buf.clone())?;
        push(full.clone(), tensor_bytes(&full, &m));
    }
    for (name, v) in [("data.mean", &state.stats.mean), ("data.std", &state.stats.std)] {
        let mut b = Vec::new();
        put_tensor(&mut b, name, &Tensor::new(vec![v.len()], v.clone())?);
        push(name.into(), b);
    }
    if !state.history.is_empty() {
        let rows: Vec<f64> = state
            .history
            .iter()
            .flat_map(|h| [h.epoch as f64, h.step as f64, h.loss])
            .collect();
        let mut b = Vec::new();
        put_tensor(&mut b, "history", &Tensor::new(vec![state.history.len(), 3], rows)?);
        push("history".into(), b);
    }
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (_, b) in table {
        out.extend_from_slice(&b);
    }

    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(state.center.len() as u32).to_le_bytes());
    for &c in &state.center {
        c.write_le(&mut out);
    }
    for c in [
        state.epoch as u64,
        state.step as u64,
        state.cursor as u64,
        state.accum.steps,
        state.accum.entropy_rows,
    ] {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for f in [state.accum.loss_sum, state.accum.entropy_sum] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint<T: Element>(state: &TrainerState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn values<T: Element>(&mut self, n: usize, shape: Vec<usize>, what: &str) -> Result<Tensor<T>> {
        let size = n
            .checked_mul(T::DTYPE.size())
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        let raw = self.take(size, what)?;
        let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("{what}: {e}")))
    }

    fn stored(&mut self, dtype: u8, n: usize, shape: Vec<usize>, what: &str) -> Result<StoredTensor> {
        match DType::from_code(dtype) {
            Some(DType::F32) => Ok(StoredTensor::F32(self.values(n, shape, what)?)),
            Some(DType::F64) => Ok(StoredTensor::F64(self.values(n, shape, what)?)),
            None => Err(Error::Format(format!("{what}: unknown dtype code {dtype}"))),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let n = r.u32("config length")? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(n, "config")?)?;

    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8(&name)?;
        let ndim = r.u32(&name)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
        let t = r.stored(dtype, numel, shape, &name)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let dtype = r.u8("center")?;
    let k = r.u32("center")? as usize;
    let center = r.stored(dtype, k, vec![k], "center")?;
    let mut counters = [0u64; 5];
    for c in &mut counters {
        *c = r.u64("counters")?;
    }
    let mut accum = [0f64; 2];
    for a in &mut accum {
        *a = f64::from_bits(r.u64("counters")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        tensors,
        center,
        counters,
        accum,
    })
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }

    fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(StoredTensor::to)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    pub fn model<T: Element>(&self, prefix: &str) -> Result<ViTModel<T>> {
        ViTModel::from_named(self.config.vit.clone(), |name| {
            self.tensors.get(&format!("{prefix}{name}")).map(StoredTensor::to)
        })
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        Ok(ChannelStats {
            mean: self.tensor::<f32>("data.mean")?.into_data(),
            std: self.tensor::<f32>("data.std")?.into_data(),
        })
    }

    pub fn into_state<T: Element>(self) -> Result<TrainerState<T>> {
        let student = self.model::<T>("student.")?;
        let teacher = self.model::<T>("teacher.")?;
        let mut state = TrainerState::from_parts(
            self.config.distill.clone(),
            self.config.views.clone(),
            self.stats()?,
            student,
            teacher,
        )?;
        let names: Vec<String> = state.student.weights().leaves().into_iter().map(|(n, _)| n).collect();
        for (buf, name) in state.optimizer.buffers.iter_mut().zip(&names) {
            let m = self.tensor::<T>(&format!("optim.momentum.{name}"))?;
            if m.numel() != buf.len() {
                return Err(Error::Format(format!("momentum {name} has the wrong size")));
            }
            *buf = m.into_data();
        }
        let center = self.center.to::<T>().into_data();
        if center.len() != state.center.len() {
            return Err(Error::Format("center length differs from proto_dim".into()));
        }
        state.center = center;
        if let Some(h) = self.tensors.get("history") {
            let h = h.to::<f64>();
            if h.ndim() != 2 || h.cols() != 3 {
                return Err(Error::Format("history must be n x 3".into()));
            }
            state.history = h
                .data()
                .chunks(3)
                .map(|r| HistoryRow {
                    epoch: r[0] as usize,
                    step: r[1] as usize,
                    loss: r[2],
                })
                .collect();
        }
        let [epoch, step, cursor, steps, rows] = self.counters;
        state.epoch = epoch as usize;
        state.step = step as usize;
        state.cursor = cursor as usize;
        state.accum = EpochAccum {
            loss_sum: self.accum[0],
            steps,
            entropy_sum: self.accum[1],
            entropy_rows: rows,
        };
        Ok(state)
    }
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<TrainerState<T>> {
    Checkpoint::read(path)?.into_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn state() -> (TrainerState<f32>, Vec<Image>) {
        let vit = ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            d_model: 4,
            heads: 2,
            head_hidden: 4,
            proto_dim: 3,
            ..ViTConfig::tiny()
        };
        let mut views = ViewConfig::for_size(8);
        views.local.count = 2;
        views.local.scale = (0.2, 0.5);
        let distill = DistillConfig {
            epochs: 2,
            batch_size: 2,
            ..DistillConfig::default()
        };
        let stats = ChannelStats {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.5, 0.5, 2.0],
        };
        let images = (0..3)
            .map(|s| {
                Image::new(
                    8,
                    8,
                    3,
                    (0..192).map(|i| ((i * 5 + s) % 9) as f32 / 4.0 - 1.0).collect(),
                )
                .unwrap()
            })
            .collect();
        (TrainerState::new(vit, distill, views, stats).unwrap(), images)
    }

    #[test]
    fn round_trip_bit_exact() {
        let (mut s, images) = state();
        s.train_step(&images).unwrap();
        let bytes = encode_checkpoint(&s).unwrap();
        let back: TrainerState<f32> = decode_checkpoint(&bytes).unwrap().into_state().unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let (mut s, images) = state();
        s.train_step(&images).unwrap();
        let mut resumed: TrainerState<f32> = decode_checkpoint(&encode_checkpoint(&s).unwrap())
            .unwrap()
            .into_state()
            .unwrap();
        s.train_step(&images).unwrap();
        resumed.train_step(&images).unwrap();
        assert_eq!(resumed, s);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let (s, _) = state();
        let bytes = encode_checkpoint(&s).unwrap();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_checkpoint(&v2).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }
}
