//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "TPLDCKPT"
//! version   u32
//! hash      str      sha-256 of the model config and vocabulary fingerprint
//! stage     str      stage tag
//! dtype     str      "f32" | "f64"
//! meta      str      JSON CheckpointMeta
//! count     u32
//! blobs     count × { name: str, ndim: u32, dims: ndim × u64, values: Π dims × dtype }
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetricRecord, StageTag, TrainState};
use crate::autodiff::{AdamConfig, AdamState, ParamVisitor, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolicyEncoders, Weights};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"TPLDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab_fingerprint: String,
    pub stage_tag: StageTag,
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub model_adam: AdamConfig,
    pub model_adam_step: u64,
    pub encoder_adam: AdamConfig,
    pub encoder_adam_step: u64,
    pub history: Vec<MetricRecord>,
}

/// Identifies the model shape and vocabulary a checkpoint belongs to.
pub fn checkpoint_hash(model: &ModelConfig, vocab_fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.hash().as_bytes());
    h.update(b"\n");
    h.update(vocab_fingerprint.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_blob<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    put_str(out, name);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

fn moments<S: Scalar>(out: &mut Vec<(String, Vec<usize>, Vec<S>)>, prefix: &str, state: &AdamState<S>) {
    for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
        out.push((format!("{prefix}.m.{i}"), vec![m.len()], m.clone()));
        out.push((format!("{prefix}.v.{i}"), vec![v.len()], v.clone()));
    }
}

/// Serializes `state` under `tag`.
pub fn checkpoint_bytes<S: Scalar>(state: &TrainState<S>, tag: StageTag) -> Result<Vec<u8>> {
    let model = &state.weights.config;
    let meta = CheckpointMeta {
        model: model.clone(),
        vocab_fingerprint: state.vocab_fingerprint.clone(),
        stage_tag: tag,
        stage: state.stage,
        epoch: state.epoch,
        step: state.step,
        model_adam: state.model_opt.hyper,
        model_adam_step: state.model_opt.step,
        encoder_adam: state.encoder_opt.hyper,
        encoder_adam_step: state.encoder_opt.step,
        history: state.history.clone(),
    };
    let mut blobs: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
    state
        .weights
        .visit_prefixed("model", &mut |n, t| blobs.push((n.to_string(), t.shape().to_vec(), t.to_vec())));
    state
        .encoders
        .visit_prefixed("sequence", &mut |n, t| blobs.push((n.to_string(), t.shape().to_vec(), t.to_vec())));
    moments(&mut blobs, "adam.model", &state.model_opt);
    moments(&mut blobs, "adam.sequence", &state.encoder_opt);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &checkpoint_hash(model, &state.vocab_fingerprint));
    put_str(&mut out, tag.as_str());
    put_str(&mut out, S::DTYPE);
    put_str(&mut out, &serde_json::to_string(&meta)?);
    put_u32(&mut out, blobs.len() as u32);
    for (name, shape, data) in &blobs {
        put_blob(&mut out, name, shape, data);
    }
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, tag: StageTag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(state, tag)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

fn restore<S: Scalar, M: ParamVisitor<S>>(
    module: &mut M,
    prefix: &str,
    blobs: &mut BTreeMap<String, (Vec<usize>, Vec<S>)>,
) -> Result<()> {
    let mut err = None;
    module.visit_prefixed_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match blobs.remove(name) {
            Some((shape, data)) if shape == t.shape() => {
                *t = Tensor::param(shape, data).expect("shape checked");
            }
            Some((shape, _)) => {
                err = Some(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", t.shape())))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn restore_moments<S: Scalar>(
    prefix: &str,
    hyper: AdamConfig,
    step: u64,
    blobs: &mut BTreeMap<String, (Vec<usize>, Vec<S>)>,
) -> AdamState<S> {
    let mut state = AdamState::new(hyper);
    state.step = step;
    let mut i = 0;
    while let (Some(m), Some(v)) = (
        blobs.remove(&format!("{prefix}.m.{i}")),
        blobs.remove(&format!("{prefix}.v.{i}")),
    ) {
        state.m.push(m.1);
        state.v.push(v.1);
        i += 1;
    }
    state
}

/// Parses a checkpoint; with `expected_hash`, refuses one written for another model or vocabulary.
pub fn read_checkpoint<S: Scalar>(bytes: &[u8], expected_hash: Option<&str>) -> Result<(TrainState<S>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hash = r.str()?.to_string();
    if let Some(want) = expected_hash {
        if hash != want {
            return Err(Error::Checkpoint(format!("config hash mismatch: file {hash}, expected {want}")));
        }
    }
    let tag: StageTag = r.str()?.parse()?;
    let dtype = r.str()?;
    if dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!("stored as {dtype}, requested {}", S::DTYPE)));
    }
    let meta: CheckpointMeta = serde_json::from_str(r.str()?)?;
    if meta.stage_tag != tag {
        return Err(Error::Checkpoint("stage tag disagrees with metadata".into()));
    }
    if checkpoint_hash(&meta.model, &meta.vocab_fingerprint) != hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let count = r.u32()?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(S::BYTES).ok_or_else(|| Error::Checkpoint(format!("{name}: oversized")))?)?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        if blobs.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut weights = Weights::init(&meta.model)?;
    let mut encoders = PolicyEncoders::init(&meta.model)?;
    restore(&mut weights, "model", &mut blobs)?;
    restore(&mut encoders, "sequence", &mut blobs)?;
    let model_opt = restore_moments("adam.model", meta.model_adam, meta.model_adam_step, &mut blobs);
    let encoder_opt = restore_moments("adam.sequence", meta.encoder_adam, meta.encoder_adam_step, &mut blobs);
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected blob {extra}")));
    }
    let state = TrainState {
        weights,
        encoders,
        model_opt,
        encoder_opt,
        stage: meta.stage,
        epoch: meta.epoch,
        step: meta.step,
        history: meta.history.clone(),
        vocab_fingerprint: meta.vocab_fingerprint.clone(),
    };
    Ok((state, meta))
}

pub fn load_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    expected_hash: Option<&str>,
) -> Result<(TrainState<S>, CheckpointMeta)> {
    let path = path.as_ref();
    read_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?, expected_hash)
}
