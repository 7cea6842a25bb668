//! Self-describing binary container for a [`NetworkState`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "KDLCKPT\n"
//! version      u32
//! fingerprint  str
//! metadata     u32 count, then (key: str, value: str) pairs
//! entries      u32 count, then per entry:
//!                name str, ndim u32, dims u64 x ndim, payload f64 x prod(dims)
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::network::{Architecture, NetworkState};
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KDLCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: NetworkState,
    pub metadata: BTreeMap<String, String>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &ck.state.fingerprint);
    buf.extend_from_slice(&(ck.metadata.len() as u32).to_le_bytes());
    for (k, v) in &ck.metadata {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(ck.state.entries.len() as u32).to_le_bytes());
    for (name, t) in &ck.state.entries {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err("file too short".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if !body.starts_with(MAGIC) {
        return Err("bad magic".into());
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err("digest mismatch".into());
    }
    let mut c = Cursor { bytes: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let fingerprint = c.string()?;
    let mut metadata = BTreeMap::new();
    for _ in 0..c.u32()? {
        let k = c.string()?;
        let v = c.string()?;
        metadata.insert(k, v);
    }
    let n = c.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let raw = c.take(len.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != body.len() {
        return Err("trailing bytes".into());
    }
    let state = NetworkState::new(fingerprint, entries).map_err(|e| e.to_string())?;
    Ok(Checkpoint { state, metadata })
}

pub fn save_checkpoint(state: &NetworkState, metadata: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let bytes = encode(&Checkpoint {
        state: state.clone(),
        metadata: metadata.clone(),
    });
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against any architecture.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    })
}

/// Reads a checkpoint and verifies it was written for `arch`.
pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    ck.state.validate_for(arch)?;
    Ok(ck)
}
