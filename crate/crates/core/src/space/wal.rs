//! WAL record framing.
//!
//! ```text
//! u64 lsn  u8 kind  u32 payload_len  payload  u32 crc32
//! ```
//!
//! The checksum covers everything before it. A record that is cut short or
//! fails its checksum at the very end of the log is a torn write and is
//! dropped; a bad record followed by more data means corruption.

use super::SpaceError;
use crate::Lsn;

pub(crate) const CRC32: crc::Crc<u32> = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC);
const FRAME: usize = 8 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WalKind {
    IndexUpdate = 1,
    Alloc = 2,
    Free = 3,
    Checkpoint = 4,
}

impl WalKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(WalKind::IndexUpdate),
            2 => Some(WalKind::Alloc),
            3 => Some(WalKind::Free),
            4 => Some(WalKind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalRecord {
    pub lsn: Lsn,
    pub kind: WalKind,
    pub payload: Vec<u8>,
}

impl WalRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME + self.payload.len());
        out.extend_from_slice(&self.lsn.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = CRC32.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn encoded_len(&self) -> usize {
        FRAME + self.payload.len()
    }
}

/// Result of scanning a log buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scan {
    pub records: Vec<WalRecord>,
    /// Length of the valid prefix in bytes.
    pub valid_len: usize,
    /// Whether a torn tail was dropped.
    pub torn: bool,
}

pub fn scan(buf: &[u8]) -> Result<Scan, SpaceError> {
    let mut records = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let rest = &buf[pos..];
        let torn = |records| Ok(Scan { records, valid_len: pos, torn: true });
        if rest.len() < FRAME {
            return torn(records);
        }
        let len = u32::from_le_bytes(rest[9..13].try_into().unwrap()) as usize;
        let total = FRAME.checked_add(len).unwrap_or(usize::MAX);
        if rest.len() < total {
            // a garbled length can also land here; both cases end the log
            return torn(records);
        }
        let body = &rest[..total - 4];
        let crc = u32::from_le_bytes(rest[total - 4..total].try_into().unwrap());
        let kind = WalKind::from_u8(rest[8]);
        if CRC32.checksum(body) != crc || kind.is_none() {
            if pos + total == buf.len() {
                return torn(records);
            }
            return Err(SpaceError::CorruptWal(format!("bad record at byte {pos}")));
        }
        records.push(WalRecord {
            lsn: u64::from_le_bytes(rest[0..8].try_into().unwrap()),
            kind: kind.unwrap(),
            payload: rest[13..13 + len].to_vec(),
        });
        pos += total;
    }
    Ok(Scan { records, valid_len: pos, torn: false })
}
