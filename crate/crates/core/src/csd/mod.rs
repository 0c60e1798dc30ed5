//! Simulated computational storage device.
//!
//! The device exposes a 4 KB block interface. Every written block is deflated
//! internally and appended to a log-structured physical space made of fixed
//! size segments; the L2P table maps each logical block to the byte-granular
//! location of its stored bytes. Logical and physical capacity are independent
//! (thin provisioning), and overwritten or trimmed bytes become garbage that a
//! copy-forward collector reclaims.

mod entry;
mod image;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::{Mutex, MutexGuard};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use entry::{decode_entry, encode_entry, EntryFormat, L2PEntry};

use crate::BLOCK_SIZE;

#[derive(Debug, Error)]
pub enum CsdError {
    #[error("lba {lba} outside logical capacity of {blocks} blocks")]
    OutOfRange { lba: u64, blocks: u64 },
    #[error("block buffer must be exactly 4096 bytes, got {0}")]
    BadBlockSize(usize),
    #[error("lba {0} is not mapped")]
    Unmapped(u64),
    #[error("physical space exhausted")]
    OutOfPhysicalSpace,
    #[error("entry not representable: {0}")]
    Unrepresentable(String),
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("corrupt device data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub logical_capacity: u64,
    pub physical_capacity: u64,
    pub entry_format: EntryFormat,
    pub deflate_level: u32,
    pub gc_segment_size: u64,
    pub gc_trigger_garbage_fraction: f64,
    /// Disables in-device compression; every block is stored raw.
    pub compression: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        // 80 MiB logical over 32 MiB physical keeps the 2.5 sizing ratio
        DeviceConfig {
            logical_capacity: 80 << 20,
            physical_capacity: 32 << 20,
            entry_format: EntryFormat::V2,
            deflate_level: 5,
            gc_segment_size: 262144,
            gc_trigger_garbage_fraction: 0.5,
            compression: true,
        }
    }
}

impl DeviceConfig {
    /// Config with the given logical capacity and physical capacity sized at
    /// logical / 2.5, rounded down to whole segments.
    pub fn with_logical_capacity(logical_capacity: u64) -> Self {
        let base = DeviceConfig::default();
        let seg = base.gc_segment_size;
        let physical = (logical_capacity as f64 / 2.5) as u64 / seg * seg;
        DeviceConfig { logical_capacity, physical_capacity: physical.max(seg), ..base }
    }

    pub fn offset_granularity(&self) -> u32 {
        self.entry_format.offset_granularity()
    }

    pub fn logical_blocks(&self) -> u64 {
        self.logical_capacity / BLOCK_SIZE as u64
    }

    pub fn segment_count(&self) -> u32 {
        (self.physical_capacity / self.gc_segment_size) as u32
    }

    pub fn validate(&self) -> Result<(), CsdError> {
        let bad = |m: String| Err(CsdError::InvalidConfig(m));
        if self.logical_capacity == 0 || self.logical_capacity % BLOCK_SIZE as u64 != 0 {
            return bad(format!("logical_capacity {} is not a positive multiple of 4096", self.logical_capacity));
        }
        let seg = self.gc_segment_size;
        if seg == 0 || seg % BLOCK_SIZE as u64 != 0 || seg > 256 * BLOCK_SIZE as u64 {
            return bad(format!("gc_segment_size {seg} must be a multiple of 4096 and at most 1 MiB"));
        }
        if self.physical_capacity < seg || self.physical_capacity % seg != 0 {
            return bad(format!(
                "physical_capacity {} must be a positive multiple of gc_segment_size {seg}",
                self.physical_capacity
            ));
        }
        if !(self.gc_trigger_garbage_fraction > 0.0 && self.gc_trigger_garbage_fraction <= 1.0) {
            return bad(format!("gc_trigger_garbage_fraction {} outside (0, 1]", self.gc_trigger_garbage_fraction));
        }
        if self.deflate_level > 9 {
            return bad(format!("deflate_level {} outside 0..=9", self.deflate_level));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceStats {
    pub logical_used: u64,
    /// Bytes of physical space held by segments: whole sealed segments plus
    /// the written part of the active one.
    pub physical_used: u64,
    /// Bytes referenced by the L2P table.
    pub physical_live: u64,
    pub gc_bytes_moved: u64,
    pub reads: u64,
    pub writes: u64,
    pub trims: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SegState {
    Free,
    Active,
    Sealed,
}

#[derive(Debug, Clone)]
struct Segment {
    state: SegState,
    data: Vec<u8>,
    live: u64,
}

impl Segment {
    fn free() -> Self {
        Segment { state: SegState::Free, data: Vec::new(), live: 0 }
    }
}

#[derive(Debug, Clone)]
struct Inner {
    cfg: DeviceConfig,
    l2p: Vec<Option<L2PEntry>>,
    segments: Vec<Segment>,
    free: BTreeSet<u32>,
    active: Option<u32>,
    stats: DeviceStats,
}

/// Deflates one 4 KB block the way the device does. Returns `None` when the
/// stored form would not be smaller than the raw block.
pub fn compress_block(data: &[u8], level: u32, format: EntryFormat) -> Option<Vec<u8>> {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(BLOCK_SIZE), Compression::new(level));
    enc.write_all(data).expect("in-memory deflate");
    let out = enc.finish().expect("in-memory deflate");
    (format.round_len(out.len() as u32) < BLOCK_SIZE as u32).then_some(out)
}

/// Bytes the device would consume to store `data` (one block).
pub fn stored_block_len(data: &[u8], level: u32, format: EntryFormat) -> u32 {
    match compress_block(data, level, format) {
        Some(c) => format.round_len(c.len() as u32),
        None => BLOCK_SIZE as u32,
    }
}

fn inflate_block(stored: &[u8]) -> Result<Vec<u8>, CsdError> {
    let mut out = Vec::with_capacity(BLOCK_SIZE);
    DeflateDecoder::new(stored)
        .take(BLOCK_SIZE as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| CsdError::Corrupt(format!("inflate failed: {e}")))?;
    if out.len() != BLOCK_SIZE {
        return Err(CsdError::Corrupt(format!("block inflated to {} bytes", out.len())));
    }
    Ok(out)
}

impl Inner {
    fn new(cfg: DeviceConfig) -> Self {
        let n = cfg.segment_count();
        Inner {
            l2p: vec![None; cfg.logical_blocks() as usize],
            segments: (0..n).map(|_| Segment::free()).collect(),
            free: (0..n).collect(),
            active: None,
            stats: DeviceStats::default(),
            cfg,
        }
    }

    fn seg_size(&self) -> u64 {
        self.cfg.gc_segment_size
    }

    fn check_lba(&self, lba: u64) -> Result<(), CsdError> {
        let blocks = self.l2p.len() as u64;
        if lba >= blocks {
            return Err(CsdError::OutOfRange { lba, blocks });
        }
        Ok(())
    }

    fn seal_active(&mut self) {
        if let Some(a) = self.active.take() {
            self.segments[a as usize].state = SegState::Sealed;
            let tail = self.seg_size() - self.segments[a as usize].data.len() as u64;
            self.stats.physical_used += tail;
        }
    }

    fn open_segment(&mut self) -> bool {
        let Some(id) = self.free.pop_first() else {
            return false;
        };
        let seg = &mut self.segments[id as usize];
        seg.state = SegState::Active;
        seg.data = Vec::with_capacity(self.cfg.gc_segment_size as usize);
        seg.live = 0;
        self.active = Some(id);
        true
    }

    fn active_room(&self) -> u64 {
        match self.active {
            Some(a) => self.seg_size() - self.segments[a as usize].data.len() as u64,
            None => 0,
        }
    }

    /// Makes room for `len` bytes in the active segment, running forced GC
    /// when no free segment is left.
    fn ensure_room(&mut self, len: u64, allow_gc: bool) -> Result<(), CsdError> {
        if self.active_room() >= len {
            return Ok(());
        }
        if self.free.is_empty() && allow_gc {
            self.forced_gc(len);
            if self.active_room() >= len {
                return Ok(());
            }
        }
        self.seal_active();
        if self.open_segment() {
            Ok(())
        } else {
            Err(CsdError::OutOfPhysicalSpace)
        }
    }

    /// Appends stored bytes and returns the entry that locates them.
    fn append(&mut self, stored: &[u8], raw: bool, allow_gc: bool) -> Result<L2PEntry, CsdError> {
        let len = self.cfg.entry_format.round_len(stored.len() as u32);
        self.ensure_room(len as u64, allow_gc)?;
        let seg_id = self.active.expect("active segment after ensure_room");
        let seg = &mut self.segments[seg_id as usize];
        let offset = seg.data.len() as u32;
        seg.data.extend_from_slice(stored);
        seg.data.resize(offset as usize + len as usize, 0);
        seg.live += len as u64;
        self.stats.physical_used += len as u64;
        self.stats.physical_live += len as u64;
        Ok(L2PEntry { segment: seg_id, offset, length: len, raw })
    }

    fn invalidate(&mut self, e: &L2PEntry) {
        let seg = &mut self.segments[e.segment as usize];
        seg.live -= e.length as u64;
        self.stats.physical_live -= e.length as u64;
    }

    fn garbage(&self, id: u32) -> u64 {
        self.seg_size() - self.segments[id as usize].live
    }

    /// Copies the live entries of a sealed segment forward and frees it.
    /// Returns the bytes of physical space reclaimed.
    fn compact(&mut self, victim: u32) -> u64 {
        debug_assert_eq!(self.segments[victim as usize].state, SegState::Sealed);
        let mut live: Vec<(usize, L2PEntry)> = self
            .l2p
            .iter()
            .enumerate()
            .filter_map(|(lba, e)| e.filter(|e| e.segment == victim).map(|e| (lba, e)))
            .collect();
        live.sort_by_key(|(_, e)| e.offset);
        let old = std::mem::replace(&mut self.segments[victim as usize], Segment::free());
        let moved: u64 = live.iter().map(|(_, e)| e.length as u64).sum();
        self.stats.physical_used -= self.seg_size();
        self.stats.physical_live -= moved;
        self.free.insert(victim);
        for (lba, e) in live {
            let bytes = &old.data[e.offset as usize..(e.offset + e.length) as usize];
            let new = self
                .append(bytes, e.raw, false)
                .expect("compaction always fits in the space it frees");
            self.l2p[lba] = Some(new);
            self.stats.gc_bytes_moved += e.length as u64;
        }
        self.seg_size() - moved
    }

    fn sealed_by_garbage(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.segments.len() as u32)
            .filter(|&i| self.segments[i as usize].state == SegState::Sealed)
            .collect();
        ids.sort_by_key(|&i| (std::cmp::Reverse(self.garbage(i)), i));
        ids
    }

    fn forced_gc(&mut self, needed: u64) {
        for victim in self.sealed_by_garbage() {
            if self.garbage(victim) == 0 {
                break;
            }
            self.compact(victim);
            if !self.free.is_empty() || self.active_room() >= needed {
                break;
            }
        }
    }

    fn run_gc(&mut self) -> u64 {
        let trigger = self.cfg.gc_trigger_garbage_fraction;
        let seg = self.seg_size() as f64;
        let victims: Vec<u32> = self
            .sealed_by_garbage()
            .into_iter()
            .filter(|&i| self.garbage(i) as f64 / seg > trigger || self.segments[i as usize].live == 0)
            .collect();
        victims.into_iter().map(|v| self.compact(v)).sum()
    }

    fn write_block(&mut self, lba: u64, data: &[u8]) -> Result<(), CsdError> {
        self.check_lba(lba)?;
        if data.len() != BLOCK_SIZE {
            return Err(CsdError::BadBlockSize(data.len()));
        }
        let compressed = if self.cfg.compression {
            compress_block(data, self.cfg.deflate_level, self.cfg.entry_format)
        } else {
            None
        };
        let entry = match &compressed {
            Some(c) => self.append(c, false, true)?,
            None => self.append(data, true, true)?,
        };
        match self.l2p[lba as usize].replace(entry) {
            Some(old) => self.invalidate(&old),
            None => self.stats.logical_used += BLOCK_SIZE as u64,
        }
        self.stats.writes += 1;
        Ok(())
    }

    fn read_block(&mut self, lba: u64) -> Result<Vec<u8>, CsdError> {
        self.check_lba(lba)?;
        let e = self.l2p[lba as usize].ok_or(CsdError::Unmapped(lba))?;
        self.stats.reads += 1;
        let seg = &self.segments[e.segment as usize];
        let stored = &seg.data[e.offset as usize..(e.offset + e.length) as usize];
        if e.raw {
            Ok(stored.to_vec())
        } else {
            inflate_block(stored)
        }
    }

    fn trim(&mut self, start: u64, count: u64) {
        let end = start.saturating_add(count).min(self.l2p.len() as u64);
        let mut any = false;
        for lba in start.min(end)..end {
            if let Some(old) = self.l2p[lba as usize].take() {
                self.invalidate(&old);
                self.stats.logical_used -= BLOCK_SIZE as u64;
                any = true;
            }
        }
        if any {
            self.stats.trims += 1;
        }
    }
}

/// The simulated device. All operations are serialized internally, so one
/// handle may be shared across threads.
#[derive(Debug)]
pub struct Csd {
    inner: Mutex<Inner>,
}

impl Clone for Csd {
    fn clone(&self) -> Self {
        Csd { inner: Mutex::new(self.lock().clone()) }
    }
}

impl Csd {
    pub fn new(cfg: DeviceConfig) -> Result<Self, CsdError> {
        cfg.validate()?;
        Ok(Csd { inner: Mutex::new(Inner::new(cfg)) })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn config(&self) -> DeviceConfig {
        self.lock().cfg.clone()
    }

    pub fn logical_blocks(&self) -> u64 {
        self.lock().l2p.len() as u64
    }

    pub fn write_block(&self, lba: u64, data: &[u8]) -> Result<(), CsdError> {
        self.lock().write_block(lba, data)
    }

    pub fn read_block(&self, lba: u64) -> Result<Vec<u8>, CsdError> {
        self.lock().read_block(lba)
    }

    /// Unmaps `count` blocks starting at `start`. Unmapped blocks are skipped.
    pub fn trim(&self, start: u64, count: u64) {
        self.lock().trim(start, count)
    }

    /// Compacts every sealed segment whose garbage fraction exceeds the
    /// configured trigger. Returns the bytes of physical space reclaimed.
    pub fn run_gc(&self) -> u64 {
        self.lock().run_gc()
    }

    pub fn device_stats(&self) -> DeviceStats {
        self.lock().stats
    }

    pub fn mapping(&self, lba: u64) -> Option<L2PEntry> {
        self.lock().l2p.get(lba as usize).copied().flatten()
    }

    /// Recomputes live and used bytes from the mapping table and segment
    /// states, independent of the incremental counters.
    pub fn recompute_usage(&self) -> (u64, u64, u64) {
        let inner = self.lock();
        let live: u64 = inner.l2p.iter().flatten().map(|e| e.length as u64).sum();
        let logical = inner.l2p.iter().flatten().count() as u64 * BLOCK_SIZE as u64;
        let used: u64 = inner
            .segments
            .iter()
            .map(|s| match s.state {
                SegState::Free => 0,
                SegState::Active => s.data.len() as u64,
                SegState::Sealed => inner.cfg.gc_segment_size,
            })
            .sum();
        (logical, used, live)
    }

    /// Per-segment live byte counts, for segments that are not free.
    pub fn segment_live_bytes(&self) -> Vec<(u32, u64)> {
        let inner = self.lock();
        inner
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.state != SegState::Free)
            .map(|(i, s)| (i as u32, s.live))
            .collect()
    }

    /// Logical blocks that currently hold data, in ascending order.
    pub fn mapped_lbas(&self) -> Vec<u64> {
        let inner = self.lock();
        inner.l2p.iter().enumerate().filter(|(_, e)| e.is_some()).map(|(i, _)| i as u64).collect()
    }

    /// Encoded size of the mapping table for the mapped blocks.
    pub fn l2p_table_bytes(&self) -> u64 {
        let inner = self.lock();
        inner.l2p.iter().flatten().count() as u64 * inner.cfg.entry_format.encoded_len() as u64
    }
}
