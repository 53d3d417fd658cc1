use std::io::{Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::bytes::Reader;
use crate::format::{deserialize, serialize};
use crate::model::ModelGraph;
use crate::par;
use crate::profile::ProfileRecord;

pub const PACKAGE_MAGIC: &[u8; 4] = b"DNPK";
pub const PACKAGE_VERSION: u16 = 1;
pub const DEFAULT_DEFLATE_LEVEL: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageEntry {
    pub variant_id: String,
    pub metrics: ProfileRecord,
    pub raw_bytes: usize,
    pub compressed_bytes: usize,
    /// CRC-32 of the inflated `.dms` bytes.
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageManifest {
    pub deflate_level: u32,
    pub entries: Vec<PackageEntry>,
}

/// Deflated `.dms` blobs, ascending by uncompressed size.
///
/// File layout: `"DNPK"`, u16 version, u32 manifest length, manifest JSON, then the blobs
/// back to back in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioPackage {
    manifest: PackageManifest,
    blobs: Vec<Vec<u8>>,
}

/// Compresses each model and sorts the portfolio by serialized size. Sizes must be distinct.
pub fn deflate_portfolio(models: &[ModelGraph], records: &[ProfileRecord], level: u32) -> Result<PortfolioPackage> {
    if models.is_empty() || models.len() != records.len() {
        return Err(Error::Config(format!(
            "portfolio needs matching, non-empty model and record lists (got {} and {})",
            models.len(),
            records.len()
        )));
    }
    if level > 9 {
        return Err(Error::Config(format!("deflate level {level} outside 0..=9")));
    }
    let raws: Vec<Vec<u8>> = par::map_slice(models, serialize);
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| raws[i].len());
    if let Some(w) = order.windows(2).find(|w| raws[w[0]].len() == raws[w[1]].len()) {
        return Err(Error::Config(format!(
            "variants {} and {} serialize to the same size ({} bytes); keep one",
            records[w[0]].variant_id,
            records[w[1]].variant_id,
            raws[w[0]].len()
        )));
    }
    let compressed: Vec<Result<Vec<u8>>> = par::map_slice(&order, |&i| deflate(&raws[i], level));
    let mut entries = Vec::with_capacity(order.len());
    let mut blobs = Vec::with_capacity(order.len());
    for (&i, blob) in order.iter().zip(compressed) {
        let blob = blob.map_err(|e| Error::CorruptPackage { entry: i, msg: format!("deflate failed: {e}") })?;
        entries.push(PackageEntry {
            variant_id: records[i].variant_id.clone(),
            metrics: records[i].clone(),
            raw_bytes: raws[i].len(),
            compressed_bytes: blob.len(),
            crc32: crc32fast::hash(&raws[i]),
        });
        blobs.push(blob);
    }
    Ok(PortfolioPackage { manifest: PackageManifest { deflate_level: level, entries }, blobs })
}

pub fn deflate(raw: &[u8], level: u32) -> Result<Vec<u8>> {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(raw.len() / 2), Compression::new(level));
    enc.write_all(raw)?;
    Ok(enc.finish()?)
}

impl PortfolioPackage {
    pub fn manifest(&self) -> &PackageManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn blob(&self, index: usize) -> &[u8] {
        &self.blobs[index]
    }

    pub fn compressed_total(&self) -> usize {
        self.blobs.iter().map(Vec::len).sum()
    }

    pub fn raw_total(&self) -> usize {
        self.manifest.entries.iter().map(|e| e.raw_bytes).sum()
    }

    /// Decompresses entry `index` and checks its length and checksum.
    pub fn inflate(&self, index: usize) -> Result<Vec<u8>> {
        let entry = &self.manifest.entries[index];
        let corrupt = |msg: String| Error::CorruptPackage { entry: index, msg };
        let mut raw = Vec::with_capacity(entry.raw_bytes);
        DeflateDecoder::new(&self.blobs[index][..])
            .read_to_end(&mut raw)
            .map_err(|e| corrupt(format!("inflate failed: {e}")))?;
        if raw.len() != entry.raw_bytes {
            return Err(corrupt(format!("inflated to {} bytes, manifest says {}", raw.len(), entry.raw_bytes)));
        }
        let crc = crc32fast::hash(&raw);
        if crc != entry.crc32 {
            return Err(corrupt(format!("checksum {crc:08x} != {:08x}", entry.crc32)));
        }
        Ok(raw)
    }

    pub fn inflate_model(&self, index: usize) -> Result<ModelGraph> {
        deserialize(&self.inflate(index)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(10 + manifest.len() + self.compressed_total());
        out.extend_from_slice(PACKAGE_MAGIC);
        out.extend_from_slice(&PACKAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for b in &self.blobs {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != PACKAGE_MAGIC {
            return Err(Error::format(0, "bad magic, expected DNPK"));
        }
        let version = r.u16()?;
        if version != PACKAGE_VERSION {
            return Err(Error::format(4, format!("unsupported package version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos();
        let manifest: PackageManifest =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(at, format!("manifest: {e}")))?;
        if manifest.entries.is_empty() {
            return Err(Error::format(at, "package has no entries"));
        }
        if manifest.entries.windows(2).any(|w| w[0].raw_bytes >= w[1].raw_bytes) {
            return Err(Error::format(at, "entries are not strictly ascending by size"));
        }
        let mut blobs = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            blobs.push(r.take(e.compressed_bytes)?.to_vec());
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos(), format!("{} trailing bytes", r.remaining())));
        }
        Ok(PortfolioPackage { manifest, blobs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
