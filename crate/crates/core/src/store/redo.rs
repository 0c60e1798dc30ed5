//! Redo records and their wire format.
//!
//! ```text
//! u64 lsn  u64 page_id  u16 offset  u16 len  payload[len]  u32 crc32
//! ```
//!
//! Transaction marks carry `page_id = u64::MAX` and an empty payload. Page
//! drops carry the page id, offset `u16::MAX` and an empty payload.

use crate::space::wal::CRC32;
use crate::{Lsn, PageId, PAGE_SIZE};

const TXN_MARK_PAGE: u64 = u64::MAX;
const DROP_OFFSET: u16 = u16::MAX;
pub const RECORD_OVERHEAD: usize = 8 + 8 + 2 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RedoKind {
    Patch,
    TxnMark,
    /// The page was removed; earlier records for it are void.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedoRecord {
    pub lsn: Lsn,
    pub page_id: PageId,
    pub offset: u16,
    pub data: Vec<u8>,
    pub kind: RedoKind,
}

impl RedoRecord {
    pub fn patch(lsn: Lsn, page_id: PageId, offset: u16, data: Vec<u8>) -> Self {
        RedoRecord { lsn, page_id, offset, data, kind: RedoKind::Patch }
    }

    pub fn txn_mark(lsn: Lsn) -> Self {
        RedoRecord { lsn, page_id: PageId(TXN_MARK_PAGE), offset: 0, data: Vec::new(), kind: RedoKind::TxnMark }
    }

    pub fn drop_page(lsn: Lsn, page_id: PageId) -> Self {
        RedoRecord { lsn, page_id, offset: DROP_OFFSET, data: Vec::new(), kind: RedoKind::Drop }
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.data.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&self.lsn.to_le_bytes());
        let page = match self.kind {
            RedoKind::Patch | RedoKind::Drop => self.page_id.0,
            RedoKind::TxnMark => TXN_MARK_PAGE,
        };
        let offset = if self.kind == RedoKind::Drop { DROP_OFFSET } else { self.offset };
        out.extend_from_slice(&page.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(self.data.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.data);
        let crc = CRC32.checksum(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Patches fit inside one page.
    pub fn validate(&self) -> Result<(), String> {
        if self.kind != RedoKind::TxnMark && self.page_id.0 == TXN_MARK_PAGE {
            return Err("page id u64::MAX is reserved".into());
        }
        if self.kind == RedoKind::Drop && !self.data.is_empty() {
            return Err("page drop carries no payload".into());
        }
        if self.kind == RedoKind::Patch {
            if self.offset as usize + self.data.len() > PAGE_SIZE {
                return Err(format!(
                    "patch at {} of {} bytes runs past the page",
                    self.offset,
                    self.data.len()
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&self, page: &mut [u8]) {
        if self.kind == RedoKind::Patch {
            let o = self.offset as usize;
            page[o..o + self.data.len()].copy_from_slice(&self.data);
        }
    }
}

/// Outcome of decoding one record from a buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    Record(RedoRecord, usize),
    /// Not enough bytes for a whole record.
    Incomplete,
    BadChecksum(usize),
}

pub fn decode(buf: &[u8]) -> Decoded {
    if buf.len() < RECORD_OVERHEAD {
        return Decoded::Incomplete;
    }
    let len = u16::from_le_bytes([buf[18], buf[19]]) as usize;
    let total = RECORD_OVERHEAD + len;
    if buf.len() < total {
        return Decoded::Incomplete;
    }
    let crc = u32::from_le_bytes(buf[total - 4..total].try_into().unwrap());
    if CRC32.checksum(&buf[..total - 4]) != crc {
        return Decoded::BadChecksum(total);
    }
    let page = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let offset = u16::from_le_bytes([buf[16], buf[17]]);
    let kind = if page == TXN_MARK_PAGE {
        RedoKind::TxnMark
    } else if offset == DROP_OFFSET && len == 0 {
        RedoKind::Drop
    } else {
        RedoKind::Patch
    };
    Decoded::Record(
        RedoRecord {
            lsn: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            page_id: PageId(page),
            offset,
            data: buf[20..20 + len].to_vec(),
            kind,
        },
        total,
    )
}

/// Decodes consecutive records, returning them with their byte offsets and
/// the length of the valid prefix. Decoding stops at the first incomplete
/// or damaged record.
pub fn scan(buf: &[u8]) -> (Vec<(usize, RedoRecord)>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Decoded::Record(rec, n) = decode(&buf[pos..]) {
        out.push((pos, rec));
        pos += n;
    }
    (out, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_overhead() {
        let r = RedoRecord::patch(9, PageId(4), 100, vec![1, 2, 3]);
        let b = r.encode();
        assert_eq!(b.len(), 27);
        assert_eq!(decode(&b), Decoded::Record(r, 27));
        let m = RedoRecord::txn_mark(10);
        assert_eq!(decode(&m.encode()), Decoded::Record(m, 24));
    }

    #[test]
    fn damage_and_truncation() {
        let mut b = RedoRecord::patch(1, PageId(0), 0, vec![7; 10]).encode();
        assert_eq!(decode(&b[..20]), Decoded::Incomplete);
        b[21] ^= 1;
        assert_eq!(decode(&b), Decoded::BadChecksum(34));
    }

    #[test]
    fn validate_bounds() {
        assert!(RedoRecord::patch(1, PageId(0), 16380, vec![0; 4]).validate().is_ok());
        assert!(RedoRecord::patch(1, PageId(0), 16380, vec![0; 5]).validate().is_err());
    }

    #[test]
    fn scan_stops_at_torn_tail() {
        let mut buf = Vec::new();
        for l in 1..=3 {
            RedoRecord::patch(l, PageId(1), 0, vec![l as u8; 4]).encode_into(&mut buf);
        }
        let (recs, valid) = scan(&buf[..buf.len() - 1]);
        assert_eq!(recs.len(), 2);
        assert_eq!(valid, 56);
    }
}
