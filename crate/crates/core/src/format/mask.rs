//! Mask sidecar: `"DNMK"`, u16 version, u32 entry count, then per entry
//! u32 node, u8 rank, u32 dims[rank], and the keep flags bit-packed LSB-first.

use std::fs;
use std::path::Path;

use super::bytes::Reader;
use crate::error::{Error, Result};
use crate::train::{MaskEntry, SparsityMask};

pub const MASK_MAGIC: &[u8; 4] = b"DNMK";
const MASK_VERSION: u16 = 1;

pub fn encode_mask(mask: &SparsityMask) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.entries().len() as u32).to_le_bytes());
    for e in mask.entries() {
        out.extend_from_slice(&(e.node as u32).to_le_bytes());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for chunk in e.keep.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | (u8::from(k) << i));
            out.push(byte);
        }
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SparsityMask> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MASK_MAGIC {
        return Err(Error::format(0, "bad mask magic"));
    }
    let version = r.u16()?;
    if version != MASK_VERSION {
        return Err(Error::format(4, format!("unsupported mask version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let node = r.u32()? as usize;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let packed = r.take(len.div_ceil(8))?;
        let keep = (0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        entries.push(MaskEntry { node, shape, keep });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos(), "trailing bytes after mask"));
    }
    SparsityMask::from_entries(entries).map_err(|e| Error::format(bytes.len(), e.to_string()))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &SparsityMask) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SparsityMask> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{architecture, Architecture};
    use crate::train::rank_and_mask;

    #[test]
    fn packs_eight_flags_per_byte() {
        let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap();
        let mask = rank_and_mask(&m, &SparsityMask::ones(&m), 0.3).unwrap();
        let bytes = encode_mask(&mask);
        let payload: usize = mask.entries().iter().map(|e| e.keep.len().div_ceil(8)).sum();
        let headers: usize = mask.entries().iter().map(|e| 4 + 1 + 4 * e.shape.len()).sum();
        assert_eq!(bytes.len(), 10 + headers + payload);
        assert_eq!(decode_mask(&bytes).unwrap(), mask);
    }

    #[test]
    fn truncated_mask_is_rejected() {
        let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap();
        let bytes = encode_mask(&SparsityMask::ones(&m));
        assert!(decode_mask(&bytes[..bytes.len() - 1]).is_err());
    }
}
