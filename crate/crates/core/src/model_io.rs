//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "OTFUSEMD"
//! version  u32
//! config   u32 length + UTF-8 JSON of ModelConfig
//! count    u32
//! count ×  { u32 name length, name, u32 ndim, ndim × u64 dims, f64 values }
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"OTFUSEMD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model file is truncated or malformed: {0}")]
    Malformed(String),
    #[error("model config: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ModelIoError>;

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in model.params.names.iter().zip(&model.params.values) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelIoError::Malformed(format!("unexpected end of file reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(ModelIoError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelIoError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len, "config")?)?;
    let count = c.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| ModelIoError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.u64("dim")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| ModelIoError::Malformed(format!("tensor `{name}` is too large")))?;
        let data = c
            .take(len, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelIoError::Malformed(e.to_string()))?;
        named.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(ModelIoError::Malformed(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(Model::from_parts(config, named)?)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let io = |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&to_bytes(model)))
        .map_err(io)
}

pub fn load(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| ModelIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    from_bytes(&buf)
}
