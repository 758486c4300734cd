//! DWVA checkpoint files.
//!
//! Layout: magic `DWVA`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 dtype tag (0 = f32, 1 = f64), a u8
//! rank, u64 dims and the little-endian payload. A CRC32 of the tensor
//! records closes the file. Optimizer moments, the RNG and the stage
//! bookkeeping are stored as extra tensors under the `adam.` and `meta.`
//! prefixes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Moments, ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DWVA";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Training state at a step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub opt: BTreeMap<String, Moments>,
    pub rng: ChaCha8Rng,
    /// Stage the state belongs to (1-3; 4 is the joint phase of the
    /// non-progressive schedule, 0 a fresh initialization).
    pub stage: u8,
    /// Optimizer steps taken within `stage`.
    pub step: u64,
    /// Whether `stage` ran to its configured end.
    pub complete: bool,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<f64> {
    let mut w = Vec::with_capacity(14);
    for c in rng.get_seed().chunks(4) {
        w.push(u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    }
    let pos = rng.get_word_pos();
    for i in 0..4 {
        w.push(((pos >> (32 * i)) & 0xffff_ffff) as u32 as f64);
    }
    let stream = rng.get_stream();
    w.push((stream & 0xffff_ffff) as f64);
    w.push((stream >> 32) as f64);
    w
}

fn rng_from_words(w: &[f64]) -> Result<ChaCha8Rng> {
    if w.len() != 14 || w.iter().any(|&x| x < 0.0 || x > u32::MAX as f64 || x.fract() != 0.0) {
        return Err(Error::Format("malformed RNG state".into()));
    }
    let u: Vec<u32> = w.iter().map(|&x| x as u32).collect();
    let mut seed = [0u8; 32];
    for i in 0..8 {
        seed[4 * i..4 * i + 4].copy_from_slice(&u[i].to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut pos = 0u128;
    for i in 0..4 {
        pos |= (u[8 + i] as u128) << (32 * i);
    }
    rng.set_stream(u[12] as u64 | ((u[13] as u64) << 32));
    rng.set_word_pos(pos);
    Ok(rng)
}

impl Checkpoint {
    pub fn fresh(params: ParameterStore, seed: u64) -> Self {
        Self {
            params,
            opt: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stage: 0,
            step: 0,
            complete: true,
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        for (n, m) in &self.opt {
            out.push((format!("adam.m.{n}"), m.m.clone()));
            out.push((format!("adam.v.{n}"), m.v.clone()));
            out.push((format!("adam.t.{n}"), Tensor::scalar(m.t as f64)));
        }
        out.push(("meta.stage".into(), Tensor::scalar(self.stage as f64)));
        out.push(("meta.step".into(), Tensor::scalar(self.step as f64)));
        out.push((
            "meta.complete".into(),
            Tensor::scalar(if self.complete { 1.0 } else { 0.0 }),
        ));
        out.push(("meta.rng".into(), Tensor::row(&rng_words(&self.rng))));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let start = buf.len();
        for (name, t) in &tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(DTYPE_F64);
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf[start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a DWVA checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let start = r.pos;
        if bytes.len() < start + 4 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[start..body_end]) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            b: &bytes[..body_end],
            pos: start,
        };
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format("dimension overflow".into()))?;
            let data = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(
                        numel
                            .checked_mul(8)
                            .ok_or_else(|| Error::Format("size overflow".into()))?,
                    )?;
                    raw.chunks(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect()
                }
                DTYPE_F32 => {
                    let raw = r.take(
                        numel
                            .checked_mul(4)
                            .ok_or_else(|| Error::Format("size overflow".into()))?,
                    )?;
                    raw.chunks(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect()
                }
                t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
        }
        if r.pos != body_end {
            return Err(Error::Format("trailing bytes after tensor records".into()));
        }
        Self::from_tensors(tensors)
    }

    fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut meta = |k: &str| -> Result<Tensor> {
            tensors
                .remove(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")))
        };
        let stage = meta("meta.stage")?.item();
        let step = meta("meta.step")?.item();
        let complete = meta("meta.complete")?.item();
        let rng = rng_from_words(meta("meta.rng")?.data())?;
        if !(0.0..=4.0).contains(&stage) || stage.fract() != 0.0 || step < 0.0 || step.fract() != 0.0 {
            return Err(Error::Format("malformed stage metadata".into()));
        }
        let mut params = ParameterStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut t = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                m.insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix("adam.t.") {
                t.insert(p.to_string(), tensor.item() as u64);
            } else if name.starts_with("meta.") {
                return Err(Error::Format(format!("unknown metadata '{name}'")));
            } else {
                params.insert(name, tensor)?;
            }
        }
        let mut opt = BTreeMap::new();
        for (name, mm) in m {
            let vv = v
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing second moment for '{name}'")))?;
            let tt = t
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing step count for '{name}'")))?;
            if !params.contains(&name) || mm.shape() != vv.shape() {
                return Err(Error::Format(format!("inconsistent optimizer state for '{name}'")));
            }
            opt.insert(name, Moments { m: mm, v: vv, t: tt });
        }
        if !v.is_empty() || !t.is_empty() {
            return Err(Error::Format("orphaned optimizer state".into()));
        }
        Ok(Self {
            params,
            opt,
            rng,
            stage: stage as u8,
            step: step as u64,
            complete: complete != 0.0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
