//! `.mgt` tensor files: `MGT1`, u32 ndim, ndim x u32 dims, then a
//! little-endian f32 row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MGT_MAGIC: &[u8; 4] = b"MGT1";

pub fn write_mgt<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&encode_mgt(t))?;
    Ok(())
}

pub fn encode_mgt(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MGT_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mgt(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = bytes;
    let t = read_mgt(&mut r)?;
    if !r.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes", r.len())));
    }
    Ok(t)
}

pub fn read_mgt<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MGT_MAGIC {
        return Err(TensorError::Format("bad magic, expected MGT1".into()));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim > 16 {
        return Err(TensorError::Format(format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(&mut r)? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| TensorError::Format(format!("dims {dims:?} too large")))?;
    let mut buf = vec![0u8; n * 4];
    read_exact(&mut r, &mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_mgt(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_mgt(t))?;
    Ok(())
}

pub fn load_mgt(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_mgt(&fs::read(path)?)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TensorError::Format(format!("truncated file: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -0.5]).unwrap();
        let b = encode_mgt(&t);
        assert_eq!(&b[..4], b"MGT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode_mgt(b"XXXX\0\0\0\0"), Err(TensorError::Format(_))));
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode_mgt(&t);
        assert!(decode_mgt(&b[..b.len() - 1]).is_err());
    }
}
