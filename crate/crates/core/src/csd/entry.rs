//! Fixed-width L2P mapping entries.
//!
//! Both formats start with the same five bytes of base mapping: the segment id
//! (31 bits, with the raw flag in the top bit) followed by the index of the
//! 4 KB frame inside the segment that the stored bytes start in. The tail
//! locates the bytes within that frame:
//!
//! ```text
//! V1 (8 bytes): u32 seg|raw  u8 frame  u24 [offset:12 | length:12]
//! V2 (7 bytes): u32 seg|raw  u8 frame  u8 offset/16  u8 length/16
//! ```
//!
//! A raw (uncompressed) block always occupies 4096 bytes, so its length field
//! is written as zero and decoded back to 4096.

use serde::{Deserialize, Serialize};

use super::CsdError;
use crate::BLOCK_SIZE;

const RAW_BIT: u32 = 1 << 31;
const MAX_SEGMENT_ID: u32 = RAW_BIT - 1;
const FRAMES_PER_BASE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryFormat {
    /// Byte-granular offsets, 8-byte entries.
    #[serde(alias = "v1")]
    V1,
    /// 16-byte offset granularity, 7-byte entries.
    #[serde(alias = "v2")]
    V2,
}

impl EntryFormat {
    pub fn encoded_len(self) -> usize {
        match self {
            EntryFormat::V1 => 8,
            EntryFormat::V2 => 7,
        }
    }

    pub fn offset_granularity(self) -> u32 {
        match self {
            EntryFormat::V1 => 1,
            EntryFormat::V2 => 16,
        }
    }

    /// Rounds a stored length up to the format's granularity.
    pub fn round_len(self, len: u32) -> u32 {
        let g = self.offset_granularity();
        len.div_ceil(g) * g
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            EntryFormat::V1 => 1,
            EntryFormat::V2 => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(EntryFormat::V1),
            2 => Some(EntryFormat::V2),
            _ => None,
        }
    }
}

impl std::str::FromStr for EntryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(EntryFormat::V1),
            "v2" => Ok(EntryFormat::V2),
            other => Err(format!("unknown entry format {other:?}, expected v1 or v2")),
        }
    }
}

/// Location of one logical block's stored bytes. The LBA itself is the
/// position of the entry in the mapping table and is not serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct L2PEntry {
    pub segment: u32,
    /// Byte offset of the stored bytes within the segment.
    pub offset: u32,
    /// Stored length in bytes (4096 when `raw`).
    pub length: u32,
    pub raw: bool,
}

impl L2PEntry {
    fn frame_and_inner(&self) -> (u32, u32) {
        (self.offset / BLOCK_SIZE as u32, self.offset % BLOCK_SIZE as u32)
    }
}

fn unrepresentable(msg: impl Into<String>) -> CsdError {
    CsdError::Unrepresentable(msg.into())
}

fn check_common(e: &L2PEntry) -> Result<(u32, u32), CsdError> {
    if e.segment > MAX_SEGMENT_ID {
        return Err(unrepresentable(format!("segment id {} exceeds 31 bits", e.segment)));
    }
    let (frame, inner) = e.frame_and_inner();
    if frame >= FRAMES_PER_BASE {
        return Err(unrepresentable(format!("frame index {frame} exceeds 8 bits")));
    }
    if e.raw && e.length != BLOCK_SIZE as u32 {
        return Err(unrepresentable(format!("raw entry must have length 4096, got {}", e.length)));
    }
    if !e.raw && (e.length == 0 || e.length >= BLOCK_SIZE as u32) {
        return Err(unrepresentable(format!("compressed length {} outside 1..4096", e.length)));
    }
    Ok((frame, inner))
}

pub fn encode_entry(e: &L2PEntry, format: EntryFormat) -> Result<Vec<u8>, CsdError> {
    let (frame, inner) = check_common(e)?;
    let mut out = Vec::with_capacity(format.encoded_len());
    let head = e.segment | if e.raw { RAW_BIT } else { 0 };
    out.extend_from_slice(&head.to_le_bytes());
    out.push(frame as u8);
    let len_field = if e.raw { 0 } else { e.length };
    match format {
        EntryFormat::V1 => {
            let packed = inner | (len_field << 12);
            out.extend_from_slice(&packed.to_le_bytes()[..3]);
        }
        EntryFormat::V2 => {
            if inner % 16 != 0 {
                return Err(unrepresentable(format!("offset {} is not 16-byte aligned", e.offset)));
            }
            if len_field % 16 != 0 {
                return Err(unrepresentable(format!("length {} is not a multiple of 16", e.length)));
            }
            out.push((inner / 16) as u8);
            out.push((len_field / 16) as u8);
        }
    }
    Ok(out)
}

pub fn decode_entry(bytes: &[u8], format: EntryFormat) -> Result<L2PEntry, CsdError> {
    if bytes.len() != format.encoded_len() {
        return Err(CsdError::Corrupt(format!(
            "entry of {} bytes, expected {}",
            bytes.len(),
            format.encoded_len()
        )));
    }
    let head = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let raw = head & RAW_BIT != 0;
    let segment = head & MAX_SEGMENT_ID;
    let frame = bytes[4] as u32;
    let (inner, len_field) = match format {
        EntryFormat::V1 => {
            let packed = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], 0]);
            (packed & 0xfff, packed >> 12)
        }
        EntryFormat::V2 => (bytes[5] as u32 * 16, bytes[6] as u32 * 16),
    };
    let length = if raw { BLOCK_SIZE as u32 } else { len_field };
    if !raw && length == 0 {
        return Err(CsdError::Corrupt("compressed entry with zero length".into()));
    }
    Ok(L2PEntry { segment, offset: frame * BLOCK_SIZE as u32 + inner, length, raw })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v1_entry_is_eight_bytes_and_roundtrips() {
        let e = L2PEntry { segment: 3, offset: 512, length: 2893, raw: false };
        let bytes = encode_entry(&e, EntryFormat::V1).unwrap();
        assert_eq!(bytes.len(), 8);
        assert_eq!(decode_entry(&bytes, EntryFormat::V1).unwrap(), e);
    }

    #[test]
    fn v2_rejects_unaligned_offset() {
        let e = L2PEntry { segment: 0, offset: 520, length: 32, raw: false };
        assert!(matches!(encode_entry(&e, EntryFormat::V2), Err(CsdError::Unrepresentable(_))));
    }

    #[test]
    fn v2_entry_is_seven_bytes() {
        let e = L2PEntry { segment: 77, offset: 8192 + 528, length: 1040, raw: false };
        let bytes = encode_entry(&e, EntryFormat::V2).unwrap();
        assert_eq!(bytes.len(), 7);
        assert_eq!(decode_entry(&bytes, EntryFormat::V2).unwrap(), e);
    }

    #[test]
    fn raw_entries_carry_full_block_length() {
        for format in [EntryFormat::V1, EntryFormat::V2] {
            let e = L2PEntry { segment: 9, offset: 4096 * 5, length: 4096, raw: true };
            let bytes = encode_entry(&e, format).unwrap();
            assert_eq!(decode_entry(&bytes, format).unwrap(), e);
        }
    }

    #[test]
    fn out_of_range_fields_are_rejected() {
        let big_seg = L2PEntry { segment: 1 << 31, offset: 0, length: 10, raw: false };
        assert!(encode_entry(&big_seg, EntryFormat::V1).is_err());
        let far = L2PEntry { segment: 0, offset: 256 * 4096, length: 10, raw: false };
        assert!(encode_entry(&far, EntryFormat::V1).is_err());
        let long = L2PEntry { segment: 0, offset: 0, length: 4096, raw: false };
        assert!(encode_entry(&long, EntryFormat::V1).is_err());
    }

    #[test]
    fn exhaustive_v1_offset_length_roundtrip() {
        // every 12-bit (offset, length) pair within one frame
        for offset in 0..4096u32 {
            for length in 1..4096u32 {
                let e = L2PEntry { segment: 5, offset: 4096 * 3 + offset, length, raw: false };
                let bytes = encode_entry(&e, EntryFormat::V1).unwrap();
                assert_eq!(decode_entry(&bytes, EntryFormat::V1).unwrap(), e);
            }
        }
    }
}
