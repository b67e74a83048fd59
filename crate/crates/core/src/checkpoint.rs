//! Binary training checkpoints. The container is fully self-checking: a
//! magic header, a config fingerprint that must match on resume, and a
//! trailing sha256 over every preceding byte. All numbers little-endian,
//! all tensors f64 in C order, in the canonical parameter order the
//! parameter structs define.

use crate::error::{Error, Result};
use crate::rng::RngState;
use ndarray::{ArrayD, IxDyn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SKFCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamSnapshot {
    pub fn capture(opt: &crate::nn::Adam) -> Self {
        AdamSnapshot {
            t: opt.t,
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }

    pub fn restore_into(&self, opt: &mut crate::nn::Adam) {
        opt.t = self.t;
        opt.m = self.m.clone();
        opt.v = self.v.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub rng: RngState,
    pub generator: Vec<ArrayD<f64>>,
    pub discriminators: Vec<ArrayD<f64>>,
    pub adam_g: AdamSnapshot,
    pub adam_d: AdamSnapshot,
}

/// sha256 of a canonical JSON serialization; field order is the struct
/// declaration order, so equal configs hash equal.
pub fn config_fingerprint<T: Serialize>(value: &T) -> [u8; 32] {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    h.finalize().into()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[ArrayD<f64>]) {
    put_u32(buf, tensors.len() as u32);
    for t in tensors {
        put_u32(buf, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(buf, d as u32);
        }
        let c = t.as_standard_layout();
        for &v in c.as_slice().expect("standard layout") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_adam(buf: &mut Vec<u8>, a: &AdamSnapshot) {
    put_u64(buf, a.t);
    put_tensors(buf, &a.m);
    put_tensors(buf, &a.v);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<ArrayD<f64>>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(Error::checkpoint(format!("implausible tensor rank {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let raw = self.take(len * 8)?;
            let mut vals = Vec::with_capacity(len);
            for chunk in raw.chunks_exact(8) {
                vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            out.push(
                ArrayD::from_shape_vec(IxDyn(&dims), vals)
                    .map_err(|e| Error::checkpoint(e.to_string()))?,
            );
        }
        Ok(out)
    }

    fn adam(&mut self) -> Result<AdamSnapshot> {
        Ok(AdamSnapshot {
            t: self.u64()?,
            m: self.tensors()?,
            v: self.tensors()?,
        })
    }
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.extend_from_slice(&ckpt.config_hash);
    put_u64(&mut buf, ckpt.iteration);
    put_u64(&mut buf, ckpt.rng.seed);
    buf.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    put_tensors(&mut buf, &ckpt.generator);
    put_tensors(&mut buf, &ckpt.discriminators);
    put_adam(&mut buf, &ckpt.adam_g);
    put_adam(&mut buf, &ckpt.adam_d);
    let digest: [u8; 32] = {
        let mut h = Sha256::new();
        h.update(&buf);
        h.finalize().into()
    };
    buf.extend_from_slice(&digest);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < MAGIC.len() + 4 + 32 + 32 {
        return Err(Error::checkpoint(format!(
            "file too small to be a checkpoint ({} bytes)",
            data.len()
        )));
    }
    let (body, trailer) = data.split_at(data.len() - 32);
    let digest: [u8; 32] = {
        let mut h = Sha256::new();
        h.update(body);
        h.finalize().into()
    };
    if digest != trailer {
        return Err(Error::checkpoint(
            "integrity check failed: trailing digest does not match content".to_string(),
        ));
    }
    let mut r = Reader { data: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let word_pos = r.u128()?;
    let generator = r.tensors()?;
    let discriminators = r.tensors()?;
    let adam_g = r.adam()?;
    let adam_d = r.adam()?;
    if r.pos != body.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after payload",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        iteration,
        config_hash,
        rng: RngState { seed, word_pos },
        generator,
        discriminators,
        adam_g,
        adam_d,
    })
}
