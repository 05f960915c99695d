//! Versioned binary container for a trained model and, optionally, its
//! replay buffer.
//!
//! ```text
//! magic "DEKWSCKP" · version u32 · dtype u8 (4 | 8)
//! metadata   u64 length + JSON {"model": config, "extra": …}
//! params     u32 count, each: name · rank u32 · dims u64… · values
//! running    u32 count, each: name · len u64 · mean · var
//! buffer     u8 present; capacity u64 · classes u64 · seen u64 ·
//!            rng seed [32] · rng stream u64 · rng word u128 ·
//!            u64 entries, each: label u64 · frames u32 · coeffs u32 ·
//!            features · logits
//! ```
//!
//! Integers are little-endian. Arrays are stored as `f64` bits, which is
//! exact for both precisions; the dtype byte must match on load.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tensor};
use crate::buffer::{BufferEntry, ReservoirBuffer};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{RunningStats, TcResNet8, TcResNet8Config};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DEKWSCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: TcResNet8Config,
    extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: TcResNet8<T>,
    pub buffer: Option<ReservoirBuffer<T>>,
    /// Free-form run information (config echo and the like).
    pub extra: serde_json::Value,
}

fn dtype_byte<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("count fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, v: &[T]) {
        for x in v {
            self.bytes(&x.as_f64().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    }
}

pub fn to_bytes<T: Scalar>(
    model: &TcResNet8<T>,
    buffer: Option<&ReservoirBuffer<T>>,
    extra: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.bytes(&VERSION.to_le_bytes());
    w.u8(dtype_byte::<T>());
    let meta = serde_json::to_vec(&Meta { model: model.config().clone(), extra: extra.clone() })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.u64(meta.len() as u64);
    w.bytes(&meta);

    w.u32(model.params().len());
    for p in model.params() {
        w.str(&p.name);
        w.u32(p.tensor.shape().len());
        for &d in p.tensor.shape() {
            w.u64(d as u64);
        }
        w.values(p.tensor.data());
    }
    w.u32(model.running_stats().len());
    for r in model.running_stats() {
        w.str(&r.name);
        w.u64(r.mean.len() as u64);
        w.values(&r.mean);
        w.values(&r.var);
    }

    match buffer {
        None => w.u8(0),
        Some(b) => {
            w.u8(1);
            w.u64(b.capacity() as u64);
            w.u64(b.num_classes() as u64);
            w.u64(b.num_seen());
            w.bytes(&b.rng().get_seed());
            w.u64(b.rng().get_stream());
            w.bytes(&b.rng().get_word_pos().to_le_bytes());
            w.u64(b.len() as u64);
            for e in b.entries() {
                w.u64(e.label as u64);
                w.u32(e.features.n_frames());
                w.u32(e.features.n_coeffs());
                w.values(e.features.values());
                w.values(&e.logits);
            }
        }
    }
    Ok(w.0)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let dtype = r.u8()?;
    if dtype != dtype_byte::<T>() {
        return Err(Error::Checkpoint(format!("stored with {}-byte floats, loading as {}", dtype, T::DTYPE)));
    }
    let meta_len = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let n_params = r.u32()?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let tensor = Tensor::new(shape, r.values(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push(Param::new(name, tensor));
    }
    let n_running = r.u32()?;
    let mut running = Vec::with_capacity(n_running);
    for _ in 0..n_running {
        let name = r.str()?;
        let c = r.len()?;
        running.push(RunningStats { name, mean: r.values(c)?, var: r.values(c)? });
    }
    let model = TcResNet8::from_parts(meta.model, params, running)?;

    let buffer = match r.u8()? {
        0 => None,
        1 => {
            let capacity = r.len()?;
            let num_classes = r.len()?;
            let num_seen = r.u64()?;
            let mut rng = Rng::from_seed(r.array()?);
            rng.set_stream(r.u64()?);
            rng.set_word_pos(u128::from_le_bytes(r.array()?));
            let n = r.len()?;
            let mut entries = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let label = r.len()?;
                let (frames, coeffs) = (r.u32()?, r.u32()?);
                let features = FeatureMatrix::new(frames, coeffs, r.values(frames * coeffs)?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let logits = r.values(num_classes)?;
                entries.push(BufferEntry { features: Arc::new(features), label, logits });
            }
            Some(ReservoirBuffer::from_parts(capacity, num_classes, entries, num_seen, rng)?)
        }
        other => return Err(Error::Checkpoint(format!("bad buffer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, buffer, extra: meta.extra })
}

/// Float width (`"f32"` or `"f64"`) a checkpoint was written with.
pub fn stored_dtype(bytes: &[u8]) -> Result<&'static str> {
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    match bytes[12] {
        4 => Ok("f32"),
        8 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unknown dtype byte {other}"))),
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &TcResNet8<T>,
    buffer: Option<&ReservoirBuffer<T>>,
    extra: &serde_json::Value,
) -> Result<()> {
    fs::write(path, to_bytes(model, buffer, extra)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
