use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// Magic prefix of a raw tensor file.
pub const PDT_MAGIC: &[u8; 4] = b"PDT1";

/// Serializes `t` as `PDT1 | rank:u32 | extents:u32... | data:f32...`, all little-endian.
///
/// Elements are narrowed to `f32`.
pub fn encode_pdt(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(PDT_MAGIC);
    out.extend_from_slice(&u32_of(t.rank())?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&u32_of(d)?.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Shape(format!("extent {n} does not fit in u32")))
}

/// Parses one PDT1 record from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_pdt(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let mut cur = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes
            .get(cur..cur + n)
            .ok_or_else(|| format!("truncated at byte {cur}"))?;
        cur += n;
        Ok(s)
    };
    if take(4)? != PDT_MAGIC {
        return Err("bad magic".into());
    }
    let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let rank = word(take(4)?);
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(word(take(4)?));
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("element count overflows")?;
    let raw = take(len.checked_mul(4).ok_or("element count overflows")?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
    Ok((t, cur))
}

pub fn write_pdt(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pdt(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_pdt(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_pdt(&bytes).map_err(|msg| Error::Format { path: path.into(), msg })?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    t.ensure_finite(&path.display().to_string())?;
    Ok(t)
}
