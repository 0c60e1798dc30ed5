//! Software compression layer.
//!
//! Pages are compressed with lz4 or zstd and stored as runs of 4 KB blocks.
//! [`compress_page`] picks the algorithm per page by weighing the blocks zstd
//! saves against the extra microseconds it costs to decompress; archival
//! ranges are packed into [`HeavySegment`]s compressed as one large unit.

mod heavy;
mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use heavy::{build_heavy_segment, decompress_unit, HeavyConfig, HeavySegment, UnitBuffer};
pub use select::{
    compress_page, decide, Branch, Decision, Evaluation, FixedLatency, LatencyProbe, ModelLatency, SelectionHints,
    SelectorConfig, WallClockProbe,
};

use crate::{BLOCK_SIZE, PAGE_SIZE};

/// zstd level used on the page write path.
pub const ZSTD_FAST_LEVEL: i32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("page must be exactly 16384 bytes, got {0}")]
    BadPageSize(usize),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("page index {index} out of range for segment of {count} pages")]
    OutOfRange { index: usize, count: usize },
    #[error("segment must hold between 1 and {max} pages, got {got}")]
    BadSegmentSize { got: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Lz4,
    Zstd,
    None,
}

impl Algorithm {
    pub fn tag(self) -> u8 {
        match self {
            Algorithm::Lz4 => 1,
            Algorithm::Zstd => 2,
            Algorithm::None => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Algorithm::None),
            1 => Some(Algorithm::Lz4),
            2 => Some(Algorithm::Zstd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lz4 => "lz4",
            Algorithm::Zstd => "zstd",
            Algorithm::None => "none",
        }
    }
}

pub fn padded_len(len: usize) -> usize {
    len.div_ceil(BLOCK_SIZE) * BLOCK_SIZE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedPage {
    pub algorithm: Algorithm,
    pub payload: Vec<u8>,
}

impl CompressedPage {
    pub fn raw(page: &[u8]) -> Self {
        CompressedPage { algorithm: Algorithm::None, payload: page.to_vec() }
    }

    pub fn padded_len(&self) -> usize {
        padded_len(self.payload.len())
    }

    pub fn block_count(&self) -> usize {
        self.padded_len() / BLOCK_SIZE
    }

    pub fn header(&self) -> PageHeader {
        PageHeader {
            algorithm: self.algorithm,
            uncompressed_len: PAGE_SIZE as u16,
            payload_len: self.payload.len() as u16,
            crc16: checksum16(&self.payload),
        }
    }
}

pub(crate) fn lz4_compress(page: &[u8]) -> Vec<u8> {
    lz4_flex::block::compress(page)
}

pub(crate) fn zstd_compress(data: &[u8], level: i32) -> Vec<u8> {
    zstd::bulk::compress(data, level).expect("zstd compression of an in-memory buffer")
}

/// Compresses with a fixed algorithm, bypassing selection. Falls back to
/// [`Algorithm::None`] when the padded result would not save a block.
pub fn compress_with(page: &[u8], algorithm: Algorithm) -> Result<CompressedPage, CodecError> {
    if page.len() != PAGE_SIZE {
        return Err(CodecError::BadPageSize(page.len()));
    }
    let payload = match algorithm {
        Algorithm::Lz4 => lz4_compress(page),
        Algorithm::Zstd => zstd_compress(page, ZSTD_FAST_LEVEL),
        Algorithm::None => return Ok(CompressedPage::raw(page)),
    };
    if padded_len(payload.len()) >= PAGE_SIZE {
        return Ok(CompressedPage::raw(page));
    }
    Ok(CompressedPage { algorithm, payload })
}

pub fn decompress_payload(algorithm: Algorithm, payload: &[u8]) -> Result<Vec<u8>, CodecError> {
    let out = match algorithm {
        Algorithm::None => payload.to_vec(),
        Algorithm::Lz4 => lz4_flex::block::decompress(payload, PAGE_SIZE)
            .map_err(|e| CodecError::CorruptPayload(format!("lz4: {e}")))?,
        Algorithm::Zstd => zstd::bulk::decompress(payload, PAGE_SIZE)
            .map_err(|e| CodecError::CorruptPayload(format!("zstd: {e}")))?,
    };
    if out.len() != PAGE_SIZE {
        return Err(CodecError::CorruptPayload(format!(
            "{} payload decoded to {} bytes",
            algorithm.name(),
            out.len()
        )));
    }
    Ok(out)
}

pub fn decompress_page(cp: &CompressedPage) -> Result<Vec<u8>, CodecError> {
    decompress_payload(cp.algorithm, &cp.payload)
}

const CRC16: crc::Crc<u16> = crc::Crc::<u16>::new(&crc::CRC_16_IBM_SDLC);

pub fn checksum16(data: &[u8]) -> u16 {
    CRC16.checksum(data)
}

/// Fixed 8-byte descriptor persisted with every compressed page:
/// `u8 algorithm, u8 reserved, u16 uncompressed_len, u16 payload_len, u16 crc16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageHeader {
    pub algorithm: Algorithm,
    pub uncompressed_len: u16,
    pub payload_len: u16,
    pub crc16: u16,
}

impl PageHeader {
    pub const LEN: usize = 8;

    pub fn encode(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[0] = self.algorithm.tag();
        out[2..4].copy_from_slice(&self.uncompressed_len.to_le_bytes());
        out[4..6].copy_from_slice(&self.payload_len.to_le_bytes());
        out[6..8].copy_from_slice(&self.crc16.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::CorruptPayload(format!("header of {} bytes", bytes.len())));
        }
        let algorithm = Algorithm::from_tag(bytes[0])
            .ok_or_else(|| CodecError::CorruptPayload(format!("unknown algorithm tag {}", bytes[0])))?;
        Ok(PageHeader {
            algorithm,
            uncompressed_len: u16::from_le_bytes([bytes[2], bytes[3]]),
            payload_len: u16::from_le_bytes([bytes[4], bytes[5]]),
            crc16: u16::from_le_bytes([bytes[6], bytes[7]]),
        })
    }

    pub fn block_count(&self) -> usize {
        padded_len(self.payload_len as usize) / BLOCK_SIZE
    }

    /// Checks a payload read back from blocks and returns the page.
    pub fn open(&self, blocks: &[u8]) -> Result<Vec<u8>, CodecError> {
        let len = self.payload_len as usize;
        if blocks.len() < len {
            return Err(CodecError::CorruptPayload("short block run".into()));
        }
        let payload = &blocks[..len];
        if checksum16(payload) != self.crc16 {
            return Err(CodecError::CorruptPayload("payload checksum mismatch".into()));
        }
        decompress_payload(self.algorithm, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};

    fn text_page(seed: u64) -> Vec<u8> {
        let words = ["storage", "page", "block", "device", "segment", "log", "index", "chunk"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(PAGE_SIZE);
        while out.len() < PAGE_SIZE {
            out.extend_from_slice(words[rng.random_range(0..words.len())].as_bytes());
            out.push(b' ');
        }
        out.truncate(PAGE_SIZE);
        out
    }

    #[test]
    fn roundtrip_each_algorithm() {
        let page = text_page(1);
        for alg in [Algorithm::Lz4, Algorithm::Zstd, Algorithm::None] {
            let cp = compress_with(&page, alg).unwrap();
            assert_eq!(cp.algorithm, alg);
            assert_eq!(decompress_page(&cp).unwrap(), page);
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let page = text_page(2);
        for alg in [Algorithm::Lz4, Algorithm::Zstd, Algorithm::None] {
            let mut cp = compress_with(&page, alg).unwrap();
            cp.payload.truncate(cp.payload.len() / 2);
            assert!(matches!(decompress_page(&cp), Err(CodecError::CorruptPayload(_))), "{alg:?}");
        }
    }

    #[test]
    fn incompressible_page_falls_back_to_none() {
        let mut page = vec![0u8; PAGE_SIZE];
        rand_chacha::ChaCha8Rng::seed_from_u64(3).fill_bytes(&mut page);
        for alg in [Algorithm::Lz4, Algorithm::Zstd] {
            let cp = compress_with(&page, alg).unwrap();
            assert_eq!(cp.algorithm, Algorithm::None);
            assert_eq!(cp.block_count(), 4);
        }
    }

    #[test]
    fn header_roundtrip_and_checksum() {
        let page = text_page(4);
        let cp = compress_with(&page, Algorithm::Zstd).unwrap();
        let h = cp.header();
        let enc = h.encode();
        assert_eq!(enc.len(), PageHeader::LEN);
        assert_eq!(PageHeader::decode(&enc).unwrap(), h);
        let mut blocks = cp.payload.clone();
        blocks.resize(cp.padded_len(), 0);
        assert_eq!(h.open(&blocks).unwrap(), page);
        blocks[0] ^= 1;
        assert!(h.open(&blocks).is_err());
    }

    #[test]
    fn wrong_page_size_rejected() {
        assert_eq!(compress_with(&[0u8; 100], Algorithm::Lz4), Err(CodecError::BadPageSize(100)));
    }
}
