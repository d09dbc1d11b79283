//! Little-endian binary tensor blobs.
//!
//! Layout: `b"EDLT"`, `u32` rank, `rank × u64` extents, then `numel × f64`.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EDLT";

pub fn encode(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor from the front of `bytes`, advancing the slice.
pub fn decode(bytes: &mut &[u8]) -> std::result::Result<Tensor, String> {
    let magic = take(bytes, 4)?;
    if magic != MAGIC {
        return Err("bad tensor magic".into());
    }
    let rank = u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("implausible tensor rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(bytes, 8)?.try_into().unwrap()) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("tensor extent overflow")?;
    let raw = take(bytes, numel.checked_mul(8).ok_or("tensor size overflow")?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub(crate) fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated: needed {n} bytes, {} left", bytes.len()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn save(tensor: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * 8);
    encode(tensor, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let tensor = decode(&mut cursor).map_err(|reason| Error::format(path, reason))?;
    if !cursor.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64)) % 1000) as f64 * 0.37 - 100.0).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            encode(&t, &mut buf);
            let mut cursor = buf.as_slice();
            prop_assert_eq!(decode(&mut cursor).unwrap(), t);
            prop_assert!(cursor.is_empty());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let t = Tensor::full(&[2, 2], 1.0).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf);
        buf.truncate(buf.len() - 3);
        assert!(decode(&mut buf.as_slice()).is_err());
    }
}
