//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DEOPCKPT"
//! version      u32      1
//! fingerprint  u64      FNV-1a of the architecture description
//! count        u32      number of tensors
//! per tensor:  u32 name length, name (UTF-8), u32 rank, rank × u64 dims,
//!              product(dims) × f64
//! ```

use std::fs;
use std::path::Path;

use deop_core::synth::name_seed;
use deop_core::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"DEOPCKPT";
pub const VERSION: u32 = 1;

pub fn fingerprint(architecture: &str) -> u64 {
    name_seed(architecture)
}

/// Parameters recovered from a checkpoint, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub params: ParamStore,
}

pub fn encode(
    store: &ParamStore,
    ids: impl IntoIterator<Item = deop_core::ParamId>,
    fingerprint: u64,
) -> Vec<u8> {
    let ids: Vec<_> = ids.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fingerprint.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], (usize, String)> {
        if self.bytes.len() - self.pos < n {
            return Err((self.pos, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, (usize, String)> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, (usize, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err((0, "not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err((8, format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| (at + 4, "tensor name is not UTF-8".to_string()))?;
        if params.find(name).is_some() {
            return Err((at, format!("duplicate tensor {name}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or((at, "tensor too large".to_string()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or((at, "tensor too large".to_string()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| (at, e.to_string()))?;
        params.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err((r.pos, "trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint {
        fingerprint,
        params,
    })
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    ids: impl IntoIterator<Item = deop_core::ParamId>,
    fingerprint: u64,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode(store, ids, fingerprint)).map_err(io_err(path))
}

/// Reads a checkpoint and refuses it unless its fingerprint matches.
pub fn load(path: &Path, expected: u64) -> Result<ParamStore> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingCheckpoint(path.into()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let ckpt = decode(&bytes).map_err(|(offset, reason)| Error::Parse {
        path: path.into(),
        offset,
        reason,
    })?;
    if ckpt.fingerprint != expected {
        return Err(Error::Fingerprint {
            path: path.into(),
            expected,
            found: ckpt.fingerprint,
        });
    }
    Ok(ckpt.params)
}
