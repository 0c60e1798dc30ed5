//! Device image persistence.
//!
//! ```text
//! header   "CSDM" u16 version u16 reserved
//!          u64 logical_capacity u64 physical_capacity u64 gc_segment_size
//!          u64 gc_trigger (f64 bits) u8 deflate_level u8 compression u16 reserved
//!          u32 active segment (u32::MAX for none)  u32 crc32
//! l2p      u8 entry_format u64 count { u64 lba, entry[8|7] }*  u32 crc32
//! segments u32 count { u32 id u8 state u32 len bytes[len] u32 crc32 }*
//! ```
//!
//! All integers are little-endian. Free segments are not stored.

use std::collections::BTreeSet;
use std::path::Path;

use super::{decode_entry, encode_entry, CsdError, Csd, DeviceConfig, EntryFormat, Inner, SegState, Segment};
use crate::BLOCK_SIZE;

const MAGIC: &[u8; 4] = b"CSDM";
const VERSION: u16 = 1;
const CRC32: crc::Crc<u32> = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC);

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CsdError> {
        if self.pos + n > self.buf.len() {
            return Err(CsdError::Corrupt(format!("image truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CsdError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CsdError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CsdError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CsdError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn check_crc(&mut self, from: usize, what: &str) -> Result<(), CsdError> {
        let expected = CRC32.checksum(&self.buf[from..self.pos]);
        if self.u32()? != expected {
            return Err(CsdError::Corrupt(format!("{what} checksum mismatch")));
        }
        Ok(())
    }
}

fn state_tag(s: SegState) -> u8 {
    match s {
        SegState::Free => 0,
        SegState::Active => 1,
        SegState::Sealed => 2,
    }
}

impl Csd {
    pub fn to_image_bytes(&self) -> Vec<u8> {
        let inner = self.lock();
        let cfg = &inner.cfg;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&cfg.logical_capacity.to_le_bytes());
        out.extend_from_slice(&cfg.physical_capacity.to_le_bytes());
        out.extend_from_slice(&cfg.gc_segment_size.to_le_bytes());
        out.extend_from_slice(&cfg.gc_trigger_garbage_fraction.to_bits().to_le_bytes());
        out.push(cfg.deflate_level as u8);
        out.push(cfg.compression as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&inner.active.unwrap_or(u32::MAX).to_le_bytes());
        let crc = CRC32.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());

        let l2p_start = out.len();
        out.push(cfg.entry_format.tag());
        let mapped: Vec<_> = inner.l2p.iter().enumerate().filter_map(|(i, e)| e.map(|e| (i, e))).collect();
        out.extend_from_slice(&(mapped.len() as u64).to_le_bytes());
        for (lba, e) in mapped {
            out.extend_from_slice(&(lba as u64).to_le_bytes());
            let bytes = encode_entry(&e, cfg.entry_format).expect("device only holds representable entries");
            out.extend_from_slice(&bytes);
        }
        let crc = CRC32.checksum(&out[l2p_start..]);
        out.extend_from_slice(&crc.to_le_bytes());

        let used: Vec<_> = inner
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.state != SegState::Free)
            .collect();
        out.extend_from_slice(&(used.len() as u32).to_le_bytes());
        for (id, seg) in used {
            let start = out.len();
            out.extend_from_slice(&(id as u32).to_le_bytes());
            out.push(state_tag(seg.state));
            out.extend_from_slice(&(seg.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&seg.data);
            let crc = CRC32.checksum(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_image_bytes(buf: &[u8]) -> Result<Csd, CsdError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(CsdError::Corrupt("bad image magic".into()));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(CsdError::Corrupt(format!("unsupported image version {version}")));
        }
        c.u16()?;
        let logical_capacity = c.u64()?;
        let physical_capacity = c.u64()?;
        let gc_segment_size = c.u64()?;
        let gc_trigger_garbage_fraction = f64::from_bits(c.u64()?);
        let deflate_level = c.u8()? as u32;
        let compression = c.u8()? != 0;
        c.u16()?;
        let active = c.u32()?;
        c.check_crc(0, "header")?;

        let l2p_start = c.pos;
        let format = EntryFormat::from_tag(c.u8()?).ok_or_else(|| CsdError::Corrupt("bad entry format".into()))?;
        let cfg = DeviceConfig {
            logical_capacity,
            physical_capacity,
            entry_format: format,
            deflate_level,
            gc_segment_size,
            gc_trigger_garbage_fraction,
            compression,
        };
        cfg.validate()?;
        let mut inner = Inner::new(cfg);
        let count = c.u64()?;
        for _ in 0..count {
            let lba = c.u64()?;
            let e = decode_entry(c.take(format.encoded_len())?, format)?;
            inner.check_lba(lba)?;
            if e.segment as usize >= inner.segments.len() {
                return Err(CsdError::Corrupt(format!("entry for lba {lba} points at segment {}", e.segment)));
            }
            inner.l2p[lba as usize] = Some(e);
        }
        c.check_crc(l2p_start, "mapping table")?;

        let nseg = c.u32()?;
        let mut seen = BTreeSet::new();
        for _ in 0..nseg {
            let start = c.pos;
            let id = c.u32()?;
            let state = match c.u8()? {
                1 => SegState::Active,
                2 => SegState::Sealed,
                s => return Err(CsdError::Corrupt(format!("bad segment state {s}"))),
            };
            let len = c.u32()? as usize;
            let data = c.take(len)?.to_vec();
            c.check_crc(start, "segment")?;
            if id as usize >= inner.segments.len() || !seen.insert(id) || len as u64 > gc_segment_size {
                return Err(CsdError::Corrupt(format!("bad segment record {id}")));
            }
            inner.segments[id as usize] = Segment { state, data, live: 0 };
            inner.free.remove(&id);
        }
        inner.active = (active != u32::MAX).then_some(active);
        if let Some(a) = inner.active {
            if inner.segments.get(a as usize).map(|s| s.state) != Some(SegState::Active) {
                return Err(CsdError::Corrupt("active segment missing".into()));
            }
        }

        // counters are rebuilt from the table and segment states
        for e in inner.l2p.iter().flatten() {
            let seg = &mut inner.segments[e.segment as usize];
            if seg.state == SegState::Free || (e.offset + e.length) as usize > seg.data.len() {
                return Err(CsdError::Corrupt("entry points past written segment data".into()));
            }
            seg.live += e.length as u64;
            inner.stats.physical_live += e.length as u64;
            inner.stats.logical_used += BLOCK_SIZE as u64;
        }
        inner.stats.physical_used = inner
            .segments
            .iter()
            .map(|s| match s.state {
                SegState::Free => 0,
                SegState::Active => s.data.len() as u64,
                SegState::Sealed => gc_segment_size,
            })
            .sum();
        Ok(Csd { inner: std::sync::Mutex::new(inner) })
    }

    pub fn save_image(&self, path: &Path) -> Result<(), CsdError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_image_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_image(path: &Path) -> Result<Csd, CsdError> {
        Csd::from_image_bytes(&std::fs::read(path)?)
    }

    /// Byte range of the mapping-table region inside an image.
    pub fn image_l2p_region(image: &[u8]) -> std::ops::Range<usize> {
        const HEADER: usize = 4 + 2 + 2 + 8 * 4 + 4 + 4 + 4;
        let count = u64::from_le_bytes(image[HEADER + 1..HEADER + 9].try_into().unwrap()) as usize;
        let format = EntryFormat::from_tag(image[HEADER]).unwrap_or(EntryFormat::V1);
        HEADER..HEADER + 1 + 8 + count * (8 + format.encoded_len()) + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_preserves_reads_and_stats() {
        let dev = Csd::new(DeviceConfig { logical_capacity: 1 << 20, physical_capacity: 1 << 20, ..Default::default() }).unwrap();
        for lba in 0..40u64 {
            let mut b = vec![(lba % 7) as u8; BLOCK_SIZE];
            b[..8].copy_from_slice(&lba.to_le_bytes());
            dev.write_block(lba, &b).unwrap();
        }
        dev.trim(10, 5);
        let img = dev.to_image_bytes();
        let back = Csd::from_image_bytes(&img).unwrap();
        let (a, b) = (dev.device_stats(), back.device_stats());
        assert_eq!((a.logical_used, a.physical_used, a.physical_live), (b.logical_used, b.physical_used, b.physical_live));
        for lba in (0..10).chain(15..40) {
            assert_eq!(dev.read_block(lba).unwrap(), back.read_block(lba).unwrap());
        }
        assert_eq!(back.to_image_bytes(), img);
    }

    #[test]
    fn corrupted_segment_is_detected() {
        let dev = Csd::new(DeviceConfig::default()).unwrap();
        dev.write_block(0, &vec![3u8; BLOCK_SIZE]).unwrap();
        let mut img = dev.to_image_bytes();
        let n = img.len();
        img[n - 6] ^= 0xff;
        assert!(matches!(Csd::from_image_bytes(&img), Err(CsdError::Corrupt(_))));
    }
}
