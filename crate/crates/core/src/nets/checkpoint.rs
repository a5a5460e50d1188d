//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "MEGA-CKPT-v1\n"
//! "META" u64:len  <json: kind, epoch, config_hash, meta>
//! "ARRS" u32:count { u32:name_len name u8:dtype u32:ndim u64*ndim u64:nbytes data }*
//! "SHA2" [32]     sha256 of every preceding byte
//! ```

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"MEGA-CKPT-v1\n";
const DTYPE_F32: u8 = 1;

/// A named dense `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: String, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name,
            shape: t.dims().to_vec(),
            data: t
                .to_dtype(candle_core::DType::F32)?
                .flatten_all()?
                .to_vec1()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), &Device::Cpu)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `"attack"` or `"victim"`.
    pub kind: String,
    pub epoch: u64,
    pub config_hash: String,
    /// Architecture descriptors and resolved configuration.
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn arrays_with_prefix(&self, prefix: &str) -> Vec<NamedArray> {
        self.arrays
            .iter()
            .filter(|a| a.name.starts_with(prefix))
            .cloned()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    epoch: u64,
    config_hash: String,
    meta: serde_json::Value,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = serde_json::to_vec(&Header {
        kind: ckpt.kind.clone(),
        epoch: ckpt.epoch,
        config_hash: ckpt.config_hash.clone(),
        meta: ckpt.meta.clone(),
    })?;
    buf.extend_from_slice(b"META");
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(b"ARRS");
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for a in &ckpt.arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {} {:?}", expected, a.name, a.shape),
                got: format!("{}", a.data.len()),
            });
        }
        buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for d in &a.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&((a.data.len() * 4) as u64).to_le_bytes());
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(b"SHA2");
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Write atomically (temp file + rename).
/// Hex SHA-256 of the JSON form of a configuration value.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
    section: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            section: self.section.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != tag {
            return Err(self.fail(format!(
                "expected tag {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
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

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(self.fail(format!("{what} length {n} exceeds remaining file size")));
        }
        Ok(n as usize)
    }
}

fn decode(path: &Path, buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        buf,
        pos: 0,
        path,
        section: "magic".into(),
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.fail("not a MEGA-CKPT-v1 file"));
    }
    r.section = "meta".into();
    r.tag(b"META")?;
    let n = r.len("header")?;
    let header: Header =
        serde_json::from_slice(r.take(n)?).map_err(|e| r.fail(format!("bad header json: {e}")))?;
    r.section = "arrays".into();
    r.tag(b"ARRS")?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        r.section = format!("arrays[{i}]");
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.fail("array name is not UTF-8"))?;
        r.section = format!("arrays[{i}] '{name}'");
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(r.fail(format!("unsupported dtype tag {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let nbytes = r.len("data")?;
        let numel: usize = shape.iter().product();
        if nbytes != numel * 4 {
            return Err(r.fail(format!("{nbytes} data bytes for shape {shape:?}")));
        }
        let data = r
            .take(nbytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    r.section = "trailer".into();
    let body_end = r.pos;
    r.tag(b"SHA2")?;
    let digest = r.take(32)?;
    if digest != Sha256::digest(&buf[..body_end]).as_slice() {
        return Err(r.fail("checksum mismatch"));
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        kind: header.kind,
        epoch: header.epoch,
        config_hash: header.config_hash,
        meta: header.meta,
        arrays,
    })
}

/// Read a checkpoint. A config hash different from `expected_hash` only
/// produces a warning.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checkpoint = decode(path, &buf)?;
    let mut warnings = Vec::new();
    if let Some(expected) = expected_hash {
        if expected != checkpoint.config_hash {
            let msg = format!(
                "{}: config hash {} differs from current {}",
                path.display(),
                checkpoint.config_hash,
                expected
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(LoadedCheckpoint {
        checkpoint,
        warnings,
    })
}
