//! Binary parameter checkpoints and the little-endian reader shared by the
//! other artifact formats.
//!
//! Layout: magic `CIR2CKPT`, `u32` version, `u32` parameter count, then per
//! parameter a length-prefixed UTF-8 name, `u32` rank, `u64` dims and the
//! row-major `f32` payload. An optimizer section follows (`u8` presence
//! flag, `u64` step, first and second moments in parameter order), then the
//! `u32` epoch, a length-prefixed JSON config echo and a SHA-256 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CIR2CKPT";
const VERSION: u32 = 1;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Cursor over a little-endian byte buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
pub struct Truncated;

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).ok_or(Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, Truncated> {
        let bytes = self.take(n.checked_mul(4).ok_or(Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// AdamW moments, aligned with the checkpoint's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u32,
    /// JSON echo of the configuration that produced the parameters.
    pub config: String,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(
        store: &ParamStore<T>,
        optimizer: Option<OptimizerState>,
        epoch: u32,
        config: String,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.cast::<f32>()))
            .collect();
        Checkpoint {
            params,
            optimizer,
            epoch,
            config,
        }
    }

    /// Copies parameter values into a store with the same names and shapes.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let values: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.cast::<T>()))
            .collect();
        store.load_values(&values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for moments in [&o.m, &o.v] {
                    for m in moments {
                        put_f32s(&mut out, m);
                    }
                }
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        let h = sha256(&out);
        out.extend_from_slice(&h);
        out
    }

    /// Content hash as written in the trailer.
    pub fn hash(&self) -> [u8; 32] {
        let b = self.to_bytes();
        b[b.len() - 32..].try_into().expect("32 bytes")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let trunc = |_| bad("truncated");
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != trailer {
            return Err(bad("content hash mismatch"));
        }
        let mut r = Reader::new(body);
        r.take(8).map_err(trunc)?;
        let version = r.u32().map_err(trunc)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.u32().map_err(trunc)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32().map_err(trunc)? as usize;
            let name = std::str::from_utf8(r.take(len).map_err(trunc)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32().map_err(trunc)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(trunc)?;
            let count = shape.iter().product();
            let data = r.f32s(count).map_err(trunc)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.u8().map_err(trunc)? {
            0 => None,
            1 => {
                let step = r.u64().map_err(trunc)?;
                let mut read = || -> Result<Vec<Vec<f32>>> {
                    params
                        .iter()
                        .map(|(_, t)| r.f32s(t.len()).map_err(trunc))
                        .collect()
                };
                let m = read()?;
                let v = read()?;
                Some(OptimizerState { step, m, v })
            }
            _ => return Err(bad("bad optimizer flag")),
        };
        let epoch = r.u32().map_err(trunc)?;
        let len = r.u32().map_err(trunc)? as usize;
        let config = std::str::from_utf8(r.take(len).map_err(trunc)?)
            .map_err(|_| bad("config echo is not UTF-8"))?
            .to_string();
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            epoch,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<[u8; 32]> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes[bytes.len() - 32..].try_into().expect("32 bytes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
