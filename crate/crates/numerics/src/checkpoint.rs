//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GELB1" | dtype:u8 (0=f32, 1=f64) | count:u32
//! repeated count times:
//!   name_len:u32 | name bytes (utf-8) | rank:u32 | dims:u64 × rank | values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{NumericsError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GELB1";

pub fn write_checkpoint<F: Element, W: Write>(mut w: W, params: &ParamSet<F>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(F::DTYPE.code());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t, _) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| NumericsError::Checkpoint("truncated file".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

/// Reads a checkpoint; every parameter comes back trainable.
pub fn read_checkpoint<F: Element, R: Read>(mut r: R) -> Result<ParamSet<F>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, MAGIC.len())? != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let code = take(&bytes, &mut pos, 1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| NumericsError::Checkpoint(format!("unknown dtype code {code}")))?;
    if dtype != F::DTYPE {
        return Err(NumericsError::Checkpoint(format!(
            "file holds {dtype:?}, requested {:?}",
            F::DTYPE
        )));
    }
    let count = read_u32(&bytes, &mut pos)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&bytes, &mut pos)? as usize;
        let name = std::str::from_utf8(take(&bytes, &mut pos, len)?)
            .map_err(|_| NumericsError::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rank = read_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| NumericsError::Checkpoint("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NumericsError::Checkpoint("shape overflow".into()))?;
        let size = dtype.size();
        let raw = take(&bytes, &mut pos, numel.checked_mul(size).ok_or_else(|| NumericsError::Checkpoint("shape overflow".into()))?)?;
        let data = raw.chunks_exact(size).map(F::read_le).collect();
        params.insert(name, Tensor::new(shape, data)?, true)?;
    }
    if pos != bytes.len() {
        return Err(NumericsError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<F: Element>(path: impl AsRef<Path>, params: &ParamSet<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Element>(path: impl AsRef<Path>) -> Result<ParamSet<F>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::<f32>::new();
        p.insert("ab", Tensor::new([2], vec![1.0, -2.0]).unwrap(), true).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(&buf[..5], b"GELB1");
        assert_eq!(buf[5], 0);
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[14..16], b"ab");
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(&buf[20..28], &2u64.to_le_bytes());
        assert_eq!(&buf[28..32], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 36);
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::zeros([3]), true).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert!(read_checkpoint::<f32, _>(&buf[..]).is_err());
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 1]).is_err());
        assert!(read_checkpoint::<f64, _>(&b"GELB2"[..]).is_err());
        assert_eq!(read_checkpoint::<f64, _>(&buf[..]).unwrap(), p);
    }
}
