//! The `FMXC1` checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       5     magic bytes "FMXC1"
//! 5       4     format version (u32, currently 1)
//! 9       4     d (u32)
//! 13      4     d_sae (u32)
//! 17      4     L (u32)
//! 21      4     k (u32)
//! 25      4     mask_p (f32)
//! 29      1     variant tag (u8: 0 dense, 1 tensor-ring, 2 CP)
//! 30      ...   rank block: none (dense) | r1, r2, r3 as u32 (TR) | r as u32 (CP)
//!               (TR stores the encoder cycle; the decoder's cores use the
//!               reversed cycle r3, r2, r1)
//! then          f32 arrays in declaration order, each row-major:
//!               encoder arrays (1 dense tensor | 3 TR cores | 3 CP factors),
//!               decoder arrays (same family),
//!               b_enc (d_sae), b_dec (L * d)
//! ```

use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{CrosscoderModel, ModelDims};
use crate::weights::{CpFactors, DenseWeights3, Dims3, TrFactors, Weights};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FMXC1";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_TR: u8 = 1;
const TAG_CP: u8 = 2;

pub fn write_checkpoint(model: &CrosscoderModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let dims = model.dims();
    for v in [dims.d, dims.d_sae, dims.layers, model.k()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.mask_p().to_le_bytes());
    match model.encoder() {
        Weights::Dense(_) => buf.push(TAG_DENSE),
        Weights::Tr(tr) => {
            buf.push(TAG_TR);
            let (r1, r2, r3) = tr.ranks();
            for r in [r1, r2, r3] {
                buf.extend_from_slice(&(r as u32).to_le_bytes());
            }
        }
        Weights::Cp(cp) => {
            buf.push(TAG_CP);
            buf.extend_from_slice(&(cp.rank() as u32).to_le_bytes());
        }
    }
    for slice in model.encoder().param_slices() {
        push_f32s(&mut buf, slice);
    }
    for slice in model.decoder().param_slices() {
        push_f32s(&mut buf, slice);
    }
    push_f32s(&mut buf, model.b_enc().as_slice().expect("standard layout"));
    push_f32s(&mut buf, model.b_dec().as_slice().expect("standard layout"));
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CrosscoderModel> {
    let buf = std::fs::read(path)?;
    parse_checkpoint(&buf)
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<CrosscoderModel> {
    let magic = take(buf, 0, 5)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic at offset 0: expected {CHECKPOINT_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = read_u32(buf, 5)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} at offset 5 (expected {CHECKPOINT_VERSION})"
        )));
    }
    let d = read_u32(buf, 9)? as usize;
    let d_sae = read_u32(buf, 13)? as usize;
    let layers = read_u32(buf, 17)? as usize;
    let k = read_u32(buf, 21)? as usize;
    let mask_p = f32::from_le_bytes(take(buf, 25, 4)?.try_into().unwrap());
    let tag = take(buf, 29, 1)?[0];
    let dims = ModelDims::new(d, d_sae, layers);

    let mut cursor = 30usize;
    let (encoder, decoder) = match tag {
        TAG_DENSE => {
            let enc = read_dense(buf, &mut cursor, dims.encoder_dims())?;
            let dec = read_dense(buf, &mut cursor, dims.decoder_dims())?;
            (Weights::Dense(enc), Weights::Dense(dec))
        }
        TAG_TR => {
            let r1 = read_u32(buf, cursor)? as usize;
            let r2 = read_u32(buf, cursor + 4)? as usize;
            let r3 = read_u32(buf, cursor + 8)? as usize;
            cursor += 12;
            let enc = read_tr(buf, &mut cursor, dims.encoder_dims(), (r1, r2, r3))?;
            // Decoder rings store the reversed rank cycle (see `init_model`).
            let dec = read_tr(buf, &mut cursor, dims.decoder_dims(), (r3, r2, r1))?;
            (Weights::Tr(enc), Weights::Tr(dec))
        }
        TAG_CP => {
            let rank = read_u32(buf, cursor)? as usize;
            cursor += 4;
            let enc = read_cp(buf, &mut cursor, dims.encoder_dims(), rank)?;
            let dec = read_cp(buf, &mut cursor, dims.decoder_dims(), rank)?;
            (Weights::Cp(enc), Weights::Cp(dec))
        }
        other => {
            return Err(Error::Format(format!("unknown variant tag {other} at offset 29")));
        }
    };

    let b_enc = Array1::from_vec(read_f32s(buf, &mut cursor, d_sae)?);
    let b_dec_raw = read_f32s(buf, &mut cursor, layers * d)?;
    let b_dec = Array2::from_shape_vec((layers, d), b_dec_raw)
        .map_err(|e| Error::Format(format!("decoder bias shape: {e}")))?;

    if cursor != buf.len() {
        return Err(Error::Format(format!(
            "trailing bytes: file is {} bytes, layout ends at offset {cursor}",
            buf.len()
        )));
    }
    CrosscoderModel::new(encoder, decoder, b_enc, b_dec, k, mask_p)
        .map_err(|e| Error::Format(format!("inconsistent checkpoint contents: {e}")))
}

fn read_dense(buf: &[u8], cursor: &mut usize, dims: Dims3) -> Result<DenseWeights3> {
    let raw = read_f32s(buf, cursor, dims.n1 * dims.n2 * dims.n3)?;
    let data = Array3::from_shape_vec((dims.n1, dims.n2, dims.n3), raw)
        .map_err(|e| Error::Format(format!("dense tensor shape: {e}")))?;
    Ok(DenseWeights3::new(data))
}

fn read_tr(buf: &[u8], cursor: &mut usize, dims: Dims3, ranks: (usize, usize, usize)) -> Result<TrFactors> {
    let (r1, r2, r3) = ranks;
    let shapes = [(r1, dims.n1, r2), (r2, dims.n2, r3), (r3, dims.n3, r1)];
    let mut cores = Vec::with_capacity(3);
    for shape in shapes {
        let raw = read_f32s(buf, cursor, shape.0 * shape.1 * shape.2)?;
        cores.push(
            Array3::from_shape_vec(shape, raw)
                .map_err(|e| Error::Format(format!("ring core shape: {e}")))?,
        );
    }
    let arr: [Array3<f32>; 3] = cores.try_into().expect("three cores");
    TrFactors::new(arr).map_err(|e| Error::Format(format!("ring factors: {e}")))
}

fn read_cp(buf: &[u8], cursor: &mut usize, dims: Dims3, rank: usize) -> Result<CpFactors> {
    let shapes = [(dims.n1, rank), (dims.n2, rank), (dims.n3, rank)];
    let mut factors = Vec::with_capacity(3);
    for shape in shapes {
        let raw = read_f32s(buf, cursor, shape.0 * shape.1)?;
        factors.push(
            Array2::from_shape_vec(shape, raw)
                .map_err(|e| Error::Format(format!("cp factor shape: {e}")))?,
        );
    }
    let arr: [Array2<f32>; 3] = factors.try_into().expect("three factors");
    CpFactors::new(arr).map_err(|e| Error::Format(format!("cp factors: {e}")))
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(buf: &[u8], cursor: &mut usize, count: usize) -> Result<Vec<f32>> {
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("array length overflow".into()))?;
    let raw = take(buf, *cursor, bytes)?;
    *cursor += bytes;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn take(buf: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    buf.get(offset..offset.saturating_add(len)).ok_or_else(|| {
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
