//! Weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        6 bytes  "DROW3X"
//! version      u32
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! n_tensors    u32
//! n_tensors x {
//!     name_len u32, name bytes,
//!     ndim u32, dims u32 x ndim,
//!     offset u64      element offset into the data block
//! }
//! n_values     u64
//! data         n_values x f32
//! ```

use std::fs;
use std::path::Path;

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DROW3X";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);

    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += data.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptWeights("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a weight file image. With `expected`, the embedded config must
/// agree on every architecture field (dropout rate is ignored).
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| Error::CorruptWeights("not a weight file".into()))? != MAGIC {
        return Err(Error::CorruptWeights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::CorruptWeights(format!("config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::CorruptWeights(format!("embedded config invalid: {e}")))?;
    if let Some(exp) = expected {
        let strip = |c: &ModelConfig| ModelConfig { dropout_rate: 0.0, ..*c };
        if strip(exp) != strip(&config) {
            return Err(Error::ConfigMismatch(format!(
                "file has fusion={} frames={} points={} widths={:?}, expected fusion={} frames={} points={} widths={:?}",
                config.fusion.as_str(),
                config.input_frames,
                config.input_points,
                config.stage_channels,
                exp.fusion.as_str(),
                exp.input_frames,
                exp.input_points,
                exp.stage_channels,
            )));
        }
    }

    let mut params = ModelParams::<f32>::init(config, 0)?;
    let n = r.u32()? as usize;
    let reference: Vec<(String, Vec<usize>, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| (name, shape, data.len()))
        .collect();
    if n != reference.len() {
        return Err(Error::CorruptWeights(format!(
            "{n} tensors, expected {}",
            reference.len()
        )));
    }
    let mut table = Vec::with_capacity(n);
    for (name, shape, len) in &reference {
        let name_len = r.u32()? as usize;
        let got = r.take(name_len)?;
        if got != name.as_bytes() {
            return Err(Error::CorruptWeights(format!(
                "tensor '{}' where '{name}' was expected",
                String::from_utf8_lossy(got)
            )));
        }
        let ndim = r.u32()? as usize;
        if ndim != shape.len() {
            return Err(Error::CorruptWeights(format!("tensor '{name}' has wrong rank")));
        }
        for &d in shape {
            if r.u32()? as usize != d {
                return Err(Error::CorruptWeights(format!("tensor '{name}' has wrong shape")));
            }
        }
        table.push((r.u64()?, *len));
    }
    let total = r.u64()?;
    let data = r.take(
        usize::try_from(total)
            .ok()
            .and_then(|t| t.checked_mul(4))
            .ok_or_else(|| Error::CorruptWeights("data size overflows".into()))?,
    )?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptWeights("trailing bytes".into()));
    }
    for ((_, dst), (offset, len)) in params.named_tensors_mut().into_iter().zip(table) {
        let start = offset as usize;
        if offset.checked_add(len as u64).is_none_or(|e| e > total) {
            return Err(Error::CorruptWeights("tensor offset out of bounds".into()));
        }
        for (k, v) in dst.iter_mut().enumerate() {
            let p = (start + k) * 4;
            *v = f32::from_le_bytes(data[p..p + 4].try_into().unwrap());
        }
    }
    if !params.all_finite() {
        return Err(Error::CorruptWeights("non-finite values".into()));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_params(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes, expected)
}
