//! `PADC` checkpoint files.
//!
//! Layout (little endian): magic `PADC`, `u32` version, `u32` length + JSON
//! config, `u32` tensor count, then per tensor `u32` name length, name, `u8`
//! dtype tag, `u32` rank, `u32` dims, payload. Optional trailing chunks are a
//! 4-byte tag, a `u64` length and the bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{PadConfig, PadnetError, ParamGroup, ParamStore};
use crate::numcore::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PADC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: PadConfig,
    pub params: ParamStore<S>,
    /// Extra tagged sections, e.g. optimizer state.
    pub chunks: Vec<([u8; 4], Vec<u8>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn chunk(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.chunks.iter().find(|(t, _)| t == tag).map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PadnetError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| PadnetError::Checkpoint(e.to_string()))?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, self.params.len())?;
        for (name, _, t) in self.params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE.tag());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for (tag, bytes) in &self.chunks {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Parses a checkpoint. Tensors stored in another dtype are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PadnetError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(PadnetError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PadnetError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config: PadConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| PadnetError::Checkpoint(format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| PadnetError::Checkpoint("parameter name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| PadnetError::Checkpoint(format!("dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let data: Vec<S> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| S::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
            };
            params.push(name, ParamGroup::Shared, Tensor::new(&shape, data)?);
        }
        let mut chunks = Vec::new();
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
            chunks.push((tag, r.take(len)?.to_vec()));
        }
        Ok(Self { config, params, chunks })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), PadnetError> {
    let v = u32::try_from(v).map_err(|_| PadnetError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PadnetError> {
        if self.pos + n > self.buf.len() {
            return Err(PadnetError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PadnetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint under `path`.
pub fn write_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<(), PadnetError> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, PadnetError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
