//! `.fuw` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "FILMUNET"
//! version     u32
//! config      u32 length + UTF-8 JSON ModelConfig
//! meta        u32 length + UTF-8 JSON TrainingMeta (or `null`)
//! count       u32 number of parameter records
//! record*     u32 name length, name bytes, u8 group (0 backbone, 1 film),
//!             u32 rank, rank × u32 extents, numel × f32 values
//! optimizer   u8 flag; when 1: 4 × f64 (lr, beta1, beta2, eps), u64 step,
//!             then per record numel × f32 first moment, numel × f32 second moment
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FilmUnet, ModelConfig};
use crate::error::{Error, Result};
use crate::noise::NoiseDistribution;
use crate::optim::{Adam, AdamConfig};
use crate::param::Group;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FILMUNET";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub noise: Option<NoiseDistribution>,
    pub config_hash: Option<String>,
}

pub struct Checkpoint<T> {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: Option<TrainingMeta>,
    pub model: FilmUnet<T>,
    pub optimizer: Option<Adam<T>>,
}

struct Record {
    name: String,
    group: Group,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_f32s<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Serialises `model` (and optionally optimizer state) to bytes.
pub fn to_bytes<T: Scalar>(model: &FilmUnet<T>, meta: Option<&TrainingMeta>, optimizer: Option<&Adam<T>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_bytes(&mut out, serde_json::to_string(model.config())?.as_bytes());
    put_bytes(&mut out, serde_json::to_string(&meta)?.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_bytes(&mut out, p.name().as_bytes());
        out.push(p.group().as_byte());
        put_u32(&mut out, p.value.rank() as u32);
        for &e in p.value.shape() {
            put_u32(&mut out, e as u32);
        }
        put_f32s(&mut out, p.value.data());
    }
    match optimizer {
        Some(adam) if adam.moments().0.len() == model.params().len() => {
            out.push(1);
            let c = adam.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&adam.steps().to_le_bytes());
            let (first, second) = adam.moments();
            for (m, v) in first.iter().zip(second) {
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
        _ => out.push(0),
    }
    Ok(out)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save<T: Scalar>(
    model: &FilmUnet<T>,
    path: impl AsRef<Path>,
    meta: Option<&TrainingMeta>,
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, meta, optimizer)?;
    let tmp = path.with_extension("fuw.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    inner: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| truncated(e, what))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn bytes(&mut self, what: &str) -> Result<Vec<u8>> {
        let len = self.u32(what)? as usize;
        if len > self.inner.len() {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let (head, rest) = self.inner.split_at(len);
        self.inner = rest;
        Ok(head.to_vec())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        if n.checked_mul(4).is_none_or(|b| b > self.inner.len()) {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let (head, rest) = self.inner.split_at(n * 4);
        self.inner = rest;
        Ok(head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

fn truncated(_: io::Error, what: &str) -> Error {
    Error::Format(format!("truncated file while reading {what}"))
}

struct Parsed {
    config: ModelConfig,
    meta: Option<TrainingMeta>,
    records: Vec<Record>,
    optimizer: Option<(AdamConfig, u64, Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader { inner: bytes };
    let magic: [u8; 8] = r.take("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_json = r.bytes("config")?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| Error::Format(format!("config JSON: {e}")))?;
    let meta_json = r.bytes("metadata")?;
    let meta: Option<TrainingMeta> = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::Format(format!("metadata JSON: {e}")))?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let what = format!("record {i}");
        let name = String::from_utf8(r.bytes(&what)?)
            .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?;
        let [g] = r.take::<1>(&what)?;
        let group = Group::from_byte(g).ok_or_else(|| Error::Format(format!("record `{name}`: unknown group byte {g}")))?;
        let rank = r.u32(&what)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("record `{name}`: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32(&what).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let values = r.f32s(numel, &format!("record `{name}`"))?;
        records.push(Record {
            name,
            group,
            shape,
            values,
        });
    }
    let [flag] = r.take::<1>("optimizer flag")?;
    let optimizer = match flag {
        0 => None,
        1 => {
            let mut f = [0.0f64; 4];
            for v in &mut f {
                *v = f64::from_le_bytes(r.take("optimizer config")?);
            }
            let step = u64::from_le_bytes(r.take("optimizer step")?);
            let mut first = Vec::with_capacity(records.len());
            let mut second = Vec::with_capacity(records.len());
            for rec in &records {
                first.push(r.f32s(rec.values.len(), "optimizer moments")?);
                second.push(r.f32s(rec.values.len(), "optimizer moments")?);
            }
            let cfg = AdamConfig {
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
            };
            Some((cfg, step, first, second))
        }
        other => return Err(Error::Format(format!("unknown optimizer flag {other}"))),
    };
    if !r.inner.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.inner.len())));
    }
    Ok(Parsed {
        config,
        meta,
        records,
        optimizer,
    })
}

fn fill<T: Scalar>(model: &mut FilmUnet<T>, records: &[Record]) -> Result<()> {
    let n = records.len().max(model.params().len());
    for i in 0..n {
        match (records.get(i), model.params().get(i)) {
            (Some(rec), Some(p)) if rec.name == p.name() && rec.shape == p.value.shape() && rec.group == p.group() => {}
            (Some(rec), Some(p)) => {
                return Err(Error::RecordShape {
                    name: rec.name.clone(),
                    found: rec.shape.clone(),
                    expected: if rec.name == p.name() { p.value.shape().to_vec() } else { Vec::new() },
                })
            }
            (Some(rec), None) => {
                return Err(Error::RecordShape {
                    name: rec.name.clone(),
                    found: rec.shape.clone(),
                    expected: Vec::new(),
                })
            }
            (None, Some(p)) => {
                return Err(Error::RecordShape {
                    name: p.name().to_string(),
                    found: Vec::new(),
                    expected: p.value.shape().to_vec(),
                })
            }
            (None, None) => unreachable!(),
        }
    }
    for (p, rec) in model.params_mut().iter_mut().zip(records) {
        p.value = Tensor::from_vec(&rec.shape, rec.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?;
    }
    Ok(())
}

fn to_t<T: Scalar>(v: Vec<Vec<f32>>) -> Vec<Vec<T>> {
    v.into_iter()
        .map(|m| m.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect())
        .collect()
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let parsed = parse(bytes)?;
    let mut model = FilmUnet::build(parsed.config.clone())?;
    fill(&mut model, &parsed.records)?;
    let optimizer = parsed
        .optimizer
        .map(|(cfg, step, m, v)| Adam::restore(cfg, step, to_t(m), to_t(v)));
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: parsed.config,
        meta: parsed.meta,
        model,
        optimizer,
    })
}

/// Reads a checkpoint and rebuilds the model from its embedded config.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}

/// Loads weights into an existing model; every record must match the
/// model's parameter names and shapes in order.
pub fn load_into<T: Scalar>(model: &mut FilmUnet<T>, path: impl AsRef<Path>) -> Result<Option<TrainingMeta>> {
    let parsed = parse(&fs::read(path)?)?;
    fill(model, &parsed.records)?;
    Ok(parsed.meta)
}
