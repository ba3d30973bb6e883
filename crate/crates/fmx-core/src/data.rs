//! Multi-layer activation batches and the `FMXA1` binary cache format.
//!
//! A batch holds a token-major `T x L x d` block of 32-bit activations: for
//! every token, one activation vector per layer. Batches optionally carry a
//! binary label per token (used by the probing pipeline).
//!
//! # Cache file layout (`FMXA1`)
//!
//! All integers little-endian.
//!
//! ```text
//! offset  size        field
//! 0       5           magic bytes "FMXA1"
//! 5       4           format version (u32, currently 1)
//! 9       4           token count T (u32)
//! 13      4           layer count L (u32)
//! 17      4           activation dim d (u32)
//! 21      4           flags (u32; bit 0 = label block present)
//! 25      4*T*L*d     activations, f32, token-major (t, then layer, then dim)
//! then    T           labels, one u8 per token (only if flag bit 0 set)
//! ```
//!
//! Round-trips are bit-exact for every finite f32 including signed zeros.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 5] = b"FMXA1";
pub const CACHE_VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;

/// Token-major block of per-layer activations with optional binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    data: Array3<f32>,
    labels: Option<Vec<u8>>,
}

impl ActivationBatch {
    /// Wrap a `(T, L, d)` array. Labels, when given, must have one entry per
    /// token and use values 0/1.
    pub fn new(data: Array3<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(ref l) = labels {
            if l.len() != data.shape()[0] {
                return Err(Error::Dim(format!(
                    "label count {} does not match token count {}",
                    l.len(),
                    data.shape()[0]
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Data("labels must be 0 or 1".into()));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn zeros(tokens: usize, layers: usize, dim: usize) -> Self {
        Self { data: Array3::zeros((tokens, layers, dim)), labels: None }
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    /// All tokens' activations at one layer, shape `(T, d)`.
    pub fn layer(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.data.slice(s![.., layer, ..])
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<u8>>) -> Result<()> {
        let data = std::mem::replace(&mut self.data, Array3::zeros((0, 0, 0)));
        let rebuilt = Self::new(data, labels)?;
        *self = rebuilt;
        Ok(())
    }

    /// Copy of a contiguous token range, labels carried along.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.tokens() {
            return Err(Error::Index(format!(
                "token range {start}..{end} out of 0..{}",
                self.tokens()
            )));
        }
        let data = self.data.slice(s![start..end, .., ..]).to_owned();
        let labels = self.labels.as_ref().map(|l| l[start..end].to_vec());
        Ok(Self { data, labels })
    }

    /// Copy with a row selection (used for epoch shuffling and split sampling).
    pub fn select_tokens(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Array3::zeros((idx.len(), self.layers(), self.dim()));
        for (row, &t) in idx.iter().enumerate() {
            if t >= self.tokens() {
                return Err(Error::Index(format!("token {t} out of 0..{}", self.tokens())));
            }
            data.slice_mut(s![row, .., ..]).assign(&self.data.slice(s![t, .., ..]));
        }
        let labels = match &self.labels {
            Some(l) => Some(idx.iter().map(|&t| l[t]).collect()),
            None => None,
        };
        Ok(Self { data, labels })
    }

    /// Per-layer mean activation vectors, shape `(L, d)`, in f64.
    pub fn layer_means(&self) -> Array2<f64> {
        let (t, l, d) = (self.tokens(), self.layers(), self.dim());
        let mut means = Array2::<f64>::zeros((l, d));
        for ti in 0..t {
            for li in 0..l {
                let row = self.data.slice(s![ti, li, ..]);
                let mut m = means.row_mut(li);
                for (acc, &v) in m.iter_mut().zip(row.iter()) {
                    *acc += v as f64;
                }
            }
        }
        if t > 0 {
            means.mapv_inplace(|v| v / t as f64);
        }
        means
    }

    /// Copy with per-layer means subtracted (centering).
    pub fn centered(&self) -> Self {
        let means = self.layer_means();
        let mut data = self.data.clone();
        for ti in 0..self.tokens() {
            for li in 0..self.layers() {
                let mut row = data.slice_mut(s![ti, li, ..]);
                for (v, &m) in row.iter_mut().zip(means.row(li).iter()) {
                    *v = (*v as f64 - m) as f32;
                }
            }
        }
        Self { data, labels: self.labels.clone() }
    }
}

/// Write a batch to `path` in the `FMXA1` layout documented above.
pub fn write_cache(batch: &ActivationBatch, path: &Path) -> Result<()> {
    let (t, l, d) = (batch.tokens(), batch.layers(), batch.dim());
    let payload = 4 * t * l * d;
    let mut buf = Vec::with_capacity(25 + payload + t);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    let flags = if batch.labels.is_some() { FLAG_LABELS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    // Token-major iteration matches the array's standard layout.
    for &v in batch.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &batch.labels {
        buf.extend_from_slice(labels);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a batch written by [`write_cache`]. Corrupt or truncated files yield
/// a format error naming the offending byte offset.
pub fn read_cache(path: &Path) -> Result<ActivationBatch> {
    let buf = std::fs::read(path)?;
    parse_cache(&buf)
}

pub fn parse_cache(buf: &[u8]) -> Result<ActivationBatch> {
    let magic = take(buf, 0, 5)?;
    if magic != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic at offset 0: expected {CACHE_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = read_u32(buf, 5)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache version {version} at offset 5 (expected {CACHE_VERSION})"
        )));
    }
    let t = read_u32(buf, 9)? as usize;
    let l = read_u32(buf, 13)? as usize;
    let d = read_u32(buf, 17)? as usize;
    let flags = read_u32(buf, 21)?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x} at offset 21")));
    }

    let n = t
        .checked_mul(l)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("header dims overflow".into()))?;
    let payload_bytes = 4 * n;
    let payload = take(buf, 25, payload_bytes)?;
    let mut values = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = Array3::from_shape_vec((t, l, d), values)
        .map_err(|e| Error::Format(format!("payload shape: {e}")))?;

    let labels = if flags & FLAG_LABELS != 0 {
        let off = 25 + payload_bytes;
        let raw = take(buf, off, t)?;
        if let Some(pos) = raw.iter().position(|&v| v > 1) {
            return Err(Error::Format(format!(
                "label byte at offset {} is {}, expected 0 or 1",
                off + pos,
                raw[pos]
            )));
        }
        Some(raw.to_vec())
    } else {
        None
    };

    let expected = 25 + payload_bytes + labels.as_ref().map_or(0, |l| l.len());
    if buf.len() != expected {
        return Err(Error::Format(format!(
            "trailing bytes: file is {} bytes, layout ends at offset {expected}",
            buf.len()
        )));
    }
    ActivationBatch::new(data, labels)
}

fn take(buf: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    buf.get(offset..offset + len).ok_or_else(|| {
        Error::Format(format!(
            "truncated: need {len} bytes at offset {offset}, file has {}",
            buf.len()
        ))
    })
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let b = take(buf, offset, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}
