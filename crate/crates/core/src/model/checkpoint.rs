//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic   b"PSAN"
//! version u32
//! config  u32 length + UTF-8 TOML of the model config
//! meta    u64 epoch, f32 dev loss (NaN when unknown)
//! optim   u8 flag; when 1: u64 step, f32 lr, beta1, beta2, eps, weight decay
//! count   u32 number of records
//! record  u8 kind (0 param, 1 buffer, 2 adam m, 3 adam v),
//!         u32 name length + name, u32 rank, u32 extent per axis,
//!         f32 data
//! ```
//!
//! Buffers are batch-norm running statistics: `<bn>.running_mean`,
//! `<bn>.running_var` and `<bn>.initialized` (one element, 0 or 1).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::Model;
use super::PsaConfig;
use crate::error::{Error, Result};
use crate::tensor::optim::AdamState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PSAN";

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub dev_loss: f32,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            epoch: 0,
            dev_loss: f32::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamState>,
}

fn config_toml(c: &PsaConfig) -> Result<String> {
    toml::to_string(c).map_err(|e| Error::Config(format!("serializing model config: {e}")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn record(&mut self, kind: u8, name: &str, shape: &[usize], data: &[f32]) {
        self.u8(kind);
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        shape.iter().for_each(|&d| self.u32(d as u32));
        self.0.reserve(data.len() * 4);
        data.iter().for_each(|&v| self.f32(v));
    }
}

fn record_len(name: &str, rank: usize, numel: usize) -> usize {
    1 + 4 + name.len() + 4 + 4 * rank + 4 * numel
}

/// Exact serialized size, computed without serializing.
pub fn checkpoint_len(model: &Model, with_optimizer: bool) -> Result<usize> {
    let store = model.store();
    let mut n = 4 + 4 + 4 + config_toml(model.config())?.len() + 8 + 4 + 1 + 4;
    if with_optimizer {
        n += 8 + 5 * 4;
    }
    for (name, t) in store.iter() {
        let r = record_len(name, t.shape().len(), t.numel());
        n += if with_optimizer { 3 * r } else { r };
    }
    for (name, s) in store.bn_names().iter().zip(store.bn_states()) {
        let c = s.running_mean.len();
        n += record_len(&format!("{name}.running_mean"), 1, c);
        n += record_len(&format!("{name}.running_var"), 1, c);
        n += record_len(&format!("{name}.initialized"), 1, 1);
    }
    Ok(n)
}

pub fn write_checkpoint(model: &Model, meta: CheckpointMeta, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let store = model.store();
    if let Some(o) = optimizer {
        if o.m.len() != store.len() || o.m.iter().zip(store.sizes()).any(|(m, n)| m.len() != n) {
            return Err(Error::dim("optimizer", "moment buffers do not match the parameters".to_string()));
        }
    }
    let mut w = Writer(Vec::with_capacity(checkpoint_len(model, optimizer.is_some())?));
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(config_toml(model.config())?.as_bytes());
    w.u64(meta.epoch);
    w.f32(meta.dev_loss);
    match optimizer {
        Some(o) => {
            w.u8(1);
            w.u64(o.t);
            for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
                w.f32(v);
            }
        }
        None => w.u8(0),
    }
    let n_buf = 3 * store.bn_states().len();
    let per_param = if optimizer.is_some() { 3 } else { 1 };
    w.u32((per_param * store.len() + n_buf) as u32);
    for (name, t) in store.iter() {
        w.record(KIND_PARAM, name, t.shape(), t.data());
    }
    for (name, s) in store.bn_names().iter().zip(store.bn_states()) {
        let c = s.running_mean.len();
        w.record(KIND_BUFFER, &format!("{name}.running_mean"), &[c], &s.running_mean);
        w.record(KIND_BUFFER, &format!("{name}.running_var"), &[c], &s.running_var);
        let flag = if s.initialized { 1.0 } else { 0.0 };
        w.record(KIND_BUFFER, &format!("{name}.initialized"), &[1], &[flag]);
    }
    if let Some(o) = optimizer {
        for (kind, moments) in [(KIND_ADAM_M, &o.m), (KIND_ADAM_V, &o.v)] {
            for ((name, t), m) in store.iter().zip(moments) {
                w.record(kind, name, t.shape(), m);
            }
        }
    }
    Ok(w.0)
}

pub fn save_checkpoint(model: &Model, path: &Path, meta: CheckpointMeta, optimizer: Option<&AdamState>) -> Result<()> {
    let bytes = write_checkpoint(model, meta, optimizer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "file ends at byte {} while {n} more bytes were expected",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("record too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Parses a checkpoint. Nothing is returned unless every parameter and
/// buffer of the embedded config was present and well formed.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg_text = r.string()?;
    let config: PsaConfig =
        toml::from_str(&cfg_text).map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;
    let meta = CheckpointMeta {
        epoch: r.u64()?,
        dev_loss: r.f32()?,
    };
    let mut optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let (lr, beta1, beta2, eps, weight_decay) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            Some((t, lr, beta1, beta2, eps, weight_decay))
        }
        f => return Err(Error::CorruptCheckpoint(format!("optimizer flag {f}"))),
    }
    .map(|(t, lr, beta1, beta2, eps, weight_decay)| AdamState {
        m: Vec::new(),
        v: Vec::new(),
        t,
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    });
    let mut model = Model::build(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_params = model.store().len();
    let bn_index: std::collections::HashMap<String, usize> = model
        .store()
        .bn_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut seen_param = vec![false; n_params];
    let mut seen_buf = vec![[false; 3]; bn_index.len()];
    let mut m_slots: Vec<Option<Vec<f32>>> = vec![None; n_params];
    let mut v_slots: Vec<Option<Vec<f32>>> = vec![None; n_params];

    let count = r.u32()?;
    for _ in 0..count {
        let kind = r.u8()?;
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().product();
        let data = r.floats(numel)?;
        match kind {
            KIND_PARAM | KIND_ADAM_M | KIND_ADAM_V => {
                let id = model
                    .store()
                    .find(&name)
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                if model.store().get(id).shape() != shape.as_slice() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "{name}: shape {shape:?}, config expects {:?}",
                        model.store().get(id).shape()
                    )));
                }
                match kind {
                    KIND_PARAM => {
                        model.store_mut().get_mut(id).data_mut().copy_from_slice(&data);
                        seen_param[id.index()] = true;
                    }
                    KIND_ADAM_M => m_slots[id.index()] = Some(data),
                    _ => v_slots[id.index()] = Some(data),
                }
            }
            KIND_BUFFER => {
                let (bn, field) = name
                    .rsplit_once('.')
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                let &i = bn_index.get(bn).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                let state = &mut model.store_mut().bn_states_mut()[i];
                let c = state.running_mean.len();
                let want = if field == "initialized" { 1 } else { c };
                if numel != want {
                    return Err(Error::CorruptCheckpoint(format!("{name}: {numel} values, expected {want}")));
                }
                let slot = match field {
                    "running_mean" => {
                        state.running_mean = data;
                        0
                    }
                    "running_var" => {
                        state.running_var = data;
                        1
                    }
                    "initialized" => {
                        state.initialized = data[0] != 0.0;
                        2
                    }
                    _ => return Err(Error::UnknownParameter(name)),
                };
                seen_buf[i][slot] = true;
            }
            k => return Err(Error::CorruptCheckpoint(format!("record kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(i) = seen_param.iter().position(|s| !s) {
        return Err(Error::CorruptCheckpoint(format!(
            "missing parameter {}",
            model.store().iter().nth(i).map(|(n, _)| n).unwrap_or("?")
        )));
    }
    if seen_buf.iter().any(|s| s.iter().any(|v| !v)) {
        return Err(Error::CorruptCheckpoint("missing batch-norm buffers".into()));
    }
    if let Some(o) = optimizer.as_mut() {
        let take = |slots: Vec<Option<Vec<f32>>>| -> Result<Vec<Vec<f32>>> {
            slots
                .into_iter()
                .map(|s| s.ok_or_else(|| Error::CorruptCheckpoint("missing optimizer moments".into())))
                .collect()
        };
        o.m = take(m_slots)?;
        o.v = take(v_slots)?;
    }
    Ok(Checkpoint {
        model,
        meta,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
