//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "RDLCKPT\0"
//! version  u32 LE
//! length   u64 LE   byte length of body
//! body:
//!   manifest length u64 LE, manifest JSON
//!   parameter count u64 LE
//!   per parameter: name length u32, name UTF-8, trainable u8,
//!                  rank u32, dims u64 x rank, values f64 LE
//! sha256(body) 32 bytes
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact. Files are written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RDLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the architecture configuration the parameters belong to.
    pub config_hash: String,
    pub step: u64,
    pub rng_seed: u64,
    /// Steps drawn from the training sample stream, as a decimal string.
    pub rng_word_pos: String,
    /// Free-form model metadata (architecture config, encoder statistics).
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

fn encode_body(ck: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&ck.manifest)
        .map_err(|e| Error::Config(format!("manifest does not serialize: {e}")))?;
    let mut body = Vec::new();
    body.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    body.extend_from_slice(&manifest);
    body.extend_from_slice(&(ck.params.len() as u64).to_le_bytes());
    for (_, p) in ck.params.iter() {
        body.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        body.extend_from_slice(p.name.as_bytes());
        body.push(p.trainable as u8);
        body.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for d in p.tensor.shape() {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in p.tensor.data() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(body)
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = encode_body(ck)?;
    let mut bytes = Vec::with_capacity(body.len() + 52);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(body.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&body);
    bytes.extend_from_slice(&Sha256::digest(&body));

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptPayload("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptPayload("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "container version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = r.u64()? as usize;
    let body = r.take(len)?;
    let digest = r.take(32)?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptPayload("checksum mismatch".into()));
    }

    let mut b = Reader { buf: body, pos: 0 };
    let mlen = b.u64()? as usize;
    let manifest: Manifest = serde_json::from_slice(b.take(mlen)?)
        .map_err(|e| Error::CorruptPayload(format!("manifest: {e}")))?;
    let count = b.u64()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = b.u32()? as usize;
        let name = std::str::from_utf8(b.take(nlen)?)
            .map_err(|_| Error::CorruptPayload("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = b.take(1)?[0] != 0;
        let rank = b.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(b.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = b.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .add(name, Tensor::new(shape, data)?, trainable)
            .map_err(|e| Error::CorruptPayload(e.to_string()))?;
    }
    Ok(Checkpoint { manifest, params })
}
