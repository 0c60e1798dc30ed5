//! Multi-page archival compression units.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{padded_len, zstd_compress, Algorithm, CodecError};
use crate::PAGE_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeavyConfig {
    pub unit_size: u64,
    pub zstd_level: i32,
}

impl Default for HeavyConfig {
    fn default() -> Self {
        HeavyConfig { unit_size: 1 << 20, zstd_level: 19 }
    }
}

impl HeavyConfig {
    pub fn pages_per_unit(&self) -> usize {
        (self.unit_size / PAGE_SIZE as u64) as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.unit_size < PAGE_SIZE as u64 || self.unit_size % PAGE_SIZE as u64 != 0 {
            return Err(format!("unit_size {} must be a positive multiple of 16384", self.unit_size));
        }
        if !(1..=22).contains(&self.zstd_level) {
            return Err(format!("zstd_level {} outside 1..=22", self.zstd_level));
        }
        Ok(())
    }
}

/// A run of pages compressed as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeavySegment {
    pub unit_size: u64,
    pub algorithm: Algorithm,
    pub payload: Vec<u8>,
    /// `(offset, length)` of each member page inside the decompressed unit.
    pub page_offsets: Vec<(u32, u32)>,
}

pub fn build_heavy_segment(pages: &[&[u8]], cfg: &HeavyConfig) -> Result<HeavySegment, CodecError> {
    let max = cfg.pages_per_unit();
    if pages.is_empty() || pages.len() > max {
        return Err(CodecError::BadSegmentSize { got: pages.len(), max });
    }
    let mut unit = Vec::with_capacity(pages.len() * PAGE_SIZE);
    let mut page_offsets = Vec::with_capacity(pages.len());
    for p in pages {
        if p.len() != PAGE_SIZE {
            return Err(CodecError::BadPageSize(p.len()));
        }
        page_offsets.push((unit.len() as u32, PAGE_SIZE as u32));
        unit.extend_from_slice(p);
    }
    Ok(HeavySegment {
        unit_size: cfg.unit_size,
        algorithm: Algorithm::Zstd,
        payload: zstd_compress(&unit, cfg.zstd_level),
        page_offsets,
    })
}

/// Decompresses a whole unit holding `page_count` pages.
pub fn decompress_unit(payload: &[u8], page_count: usize) -> Result<Vec<u8>, CodecError> {
    let expect = page_count * PAGE_SIZE;
    let unit = zstd::bulk::decompress(payload, expect).map_err(|e| CodecError::CorruptPayload(format!("unit: {e}")))?;
    if unit.len() != expect {
        return Err(CodecError::CorruptPayload(format!("unit decoded to {} bytes, expected {expect}", unit.len())));
    }
    Ok(unit)
}

impl HeavySegment {
    pub fn page_count(&self) -> usize {
        self.page_offsets.len()
    }

    pub fn padded_len(&self) -> usize {
        padded_len(self.payload.len())
    }

    fn slice<'a>(&self, unit: &'a [u8], index: usize) -> Result<&'a [u8], CodecError> {
        let &(off, len) = self
            .page_offsets
            .get(index)
            .ok_or(CodecError::OutOfRange { index, count: self.page_count() })?;
        Ok(&unit[off as usize..(off + len) as usize])
    }

    /// Decompresses the unit and returns one member page.
    pub fn extract_page(&self, index: usize) -> Result<Vec<u8>, CodecError> {
        if index >= self.page_count() {
            return Err(CodecError::OutOfRange { index, count: self.page_count() });
        }
        let unit = decompress_unit(&self.payload, self.page_count())?;
        Ok(self.slice(&unit, index)?.to_vec())
    }
}

/// Holds the most recently decompressed units so repeated reads from the
/// same segment skip decompression.
#[derive(Debug)]
pub struct UnitBuffer {
    capacity: usize,
    entries: Vec<(u64, Arc<Vec<u8>>)>,
    pub decompressions: u64,
    pub hits: u64,
}

impl UnitBuffer {
    pub fn new(capacity: usize) -> Self {
        UnitBuffer { capacity: capacity.max(1), entries: Vec::new(), decompressions: 0, hits: 0 }
    }

    /// Returns the decompressed unit for `key`, calling `load` for the
    /// compressed payload on a miss.
    pub fn get_or_load(
        &mut self,
        key: u64,
        page_count: usize,
        load: impl FnOnce() -> Result<Vec<u8>, CodecError>,
    ) -> Result<Arc<Vec<u8>>, CodecError> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            let e = self.entries.remove(pos);
            let unit = e.1.clone();
            self.entries.push(e);
            self.hits += 1;
            return Ok(unit);
        }
        let unit = Arc::new(decompress_unit(&load()?, page_count)?);
        self.decompressions += 1;
        if self.entries.len() == self.capacity {
            self.entries.remove(0);
        }
        self.entries.push((key, unit.clone()));
        Ok(unit)
    }

    pub fn invalidate(&mut self, key: u64) {
        self.entries.retain(|(k, _)| *k != key);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Extracts a page of `seg` through the buffer.
    pub fn extract(&mut self, key: u64, seg: &HeavySegment, index: usize) -> Result<Vec<u8>, CodecError> {
        if index >= seg.page_count() {
            return Err(CodecError::OutOfRange { index, count: seg.page_count() });
        }
        let unit = self.get_or_load(key, seg.page_count(), || Ok(seg.payload.clone()))?;
        Ok(seg.slice(&unit, index)?.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{compress_with, Algorithm};

    fn vocab_page(i: usize) -> Vec<u8> {
        let words = ["account", "balance", "region", "status", "shipped", "pending", "invoice", "customer"];
        let mut out = Vec::with_capacity(PAGE_SIZE);
        let mut k = i * 7;
        while out.len() < PAGE_SIZE {
            k = k.wrapping_mul(1103515245).wrapping_add(12345) % 65536;
            out.extend_from_slice(format!("{}:{} ", words[k % words.len()], k % 997).as_bytes());
        }
        out.truncate(PAGE_SIZE);
        out
    }

    #[test]
    fn single_page_segment() {
        let p = vocab_page(0);
        let seg = build_heavy_segment(&[&p], &HeavyConfig::default()).unwrap();
        assert_eq!(seg.page_offsets, vec![(0, 16384)]);
        assert_eq!(seg.extract_page(0).unwrap(), p);
    }

    #[test]
    fn extracts_every_member_and_rejects_out_of_range() {
        let pages: Vec<Vec<u8>> = (0..64).map(vocab_page).collect();
        let refs: Vec<&[u8]> = pages.iter().map(|p| p.as_slice()).collect();
        let seg = build_heavy_segment(&refs, &HeavyConfig::default()).unwrap();
        let mut buf = UnitBuffer::new(2);
        for (i, p) in pages.iter().enumerate() {
            assert_eq!(&buf.extract(1, &seg, i).unwrap(), p);
        }
        assert_eq!(buf.decompressions, 1);
        assert_eq!(seg.extract_page(64), Err(CodecError::OutOfRange { index: 64, count: 64 }));
    }

    #[test]
    fn shared_vocabulary_unit_beats_per_page_payloads() {
        let pages: Vec<Vec<u8>> = (0..64).map(vocab_page).collect();
        let refs: Vec<&[u8]> = pages.iter().map(|p| p.as_slice()).collect();
        let seg = build_heavy_segment(&refs, &HeavyConfig::default()).unwrap();
        let individual: usize = pages.iter().map(|p| compress_with(p, Algorithm::Zstd).unwrap().payload.len()).sum();
        assert!(seg.payload.len() < individual, "{} vs {individual}", seg.payload.len());
    }

    #[test]
    fn bad_segment_sizes() {
        assert!(matches!(build_heavy_segment(&[], &HeavyConfig::default()), Err(CodecError::BadSegmentSize { .. })));
        let p = vocab_page(1);
        let refs = vec![p.as_slice(); 65];
        assert!(matches!(build_heavy_segment(&refs, &HeavyConfig::default()), Err(CodecError::BadSegmentSize { .. })));
    }
}
