//! The per-chunk page store.
//!
//! A [`ChunkStore`] writes 16 KB pages through the software codec onto the
//! device, keeps redo records on the fast log without compressing them, and
//! materializes pages at a requested LSN by applying pending records to the
//! stored base image. Redo records evicted from memory go to a 4 KB slot
//! reserved for their page, so one device read brings back all of them.
//!
//! Every acknowledged operation is held by a majority of replicas and, for
//! page writes, committed to the WAL before returning.

mod metrics;
pub mod redo;
pub mod replica;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::StoreMetrics;
pub use redo::{RedoKind, RedoRecord};
pub use replica::{Fault, Image, QuorumLost, ReplOp, ReplicaSet, ReplicaView, ReplicationStats};
pub use crate::space::WriteMode;

use crate::codec::{
    build_heavy_segment, compress_page, compress_with, Algorithm, CodecError, CompressedPage, HeavyConfig,
    LatencyProbe, ModelLatency, SelectionHints, SelectorConfig, UnitBuffer,
};
use crate::csd::{Csd, CsdError};
use crate::fastlog::{LogDevice, LogError};
use crate::space::wal::CRC32;
use crate::space::{IndexEntry, Location, SpaceError, SpaceIndex};
use crate::{BlockRun, ChunkId, Lsn, PageId, BLOCK_SIZE, PAGE_SIZE};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("page {0} not found")]
    NotFound(PageId),
    #[error("lsn {requested} is beyond the durable lsn {durable}")]
    FutureLsn { requested: Lsn, durable: Lsn },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("logical space exhausted")]
    OutOfLogicalSpace,
    #[error("physical space exhausted")]
    OutOfPhysicalSpace,
    #[error("replication lost: {acks} of {needed} acknowledgments")]
    ReplicationLost { acks: usize, needed: usize },
    #[error("redo log full")]
    RedoLogFull,
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Space(SpaceError),
    #[error(transparent)]
    Device(CsdError),
    #[error(transparent)]
    Log(LogError),
}

impl From<SpaceError> for StoreError {
    fn from(e: SpaceError) -> Self {
        match e {
            SpaceError::OutOfLogicalSpace => StoreError::OutOfLogicalSpace,
            SpaceError::NotFound(p) => StoreError::NotFound(p),
            e => StoreError::Space(e),
        }
    }
}

impl From<CsdError> for StoreError {
    fn from(e: CsdError) -> Self {
        match e {
            CsdError::OutOfPhysicalSpace => StoreError::OutOfPhysicalSpace,
            e => StoreError::Device(e),
        }
    }
}

impl From<LogError> for StoreError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Full { .. } => StoreError::RedoLogFull,
            e => StoreError::Log(e),
        }
    }
}

impl From<CodecError> for StoreError {
    fn from(e: CodecError) -> Self {
        StoreError::Corrupt(e.to_string())
    }
}

impl From<QuorumLost> for StoreError {
    fn from(q: QuorumLost) -> Self {
        StoreError::ReplicationLost { acks: q.acks, needed: q.needed }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Which software codec the write path uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionPolicy {
    /// Per-page lz4/zstd selection.
    Adaptive,
    Lz4,
    Zstd,
    /// No software compression; the device compresses alone.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub chunk: u32,
    pub policy: CompressionPolicy,
    pub selector: SelectorConfig,
    pub heavy: HeavyConfig,
    /// Bytes of redo records kept in memory before eviction.
    pub log_cache_budget: usize,
    pub replicas: usize,
    pub replica_seed: u64,
    /// Evict records into per-page slots; when off, evicted records are read
    /// back from their scattered positions in the redo log.
    pub per_page_log: bool,
    pub redo_log_capacity: u64,
    pub wal_capacity: u64,
    pub unit_buffer_units: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            chunk: 0,
            policy: CompressionPolicy::Adaptive,
            selector: SelectorConfig::default(),
            heavy: HeavyConfig::default(),
            log_cache_budget: 1 << 20,
            replicas: 3,
            replica_seed: 0,
            per_page_log: true,
            redo_log_capacity: 64 << 20,
            wal_capacity: 16 << 20,
            unit_buffer_units: 4,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.selector.validate()?;
        self.heavy.validate()?;
        if self.replicas == 0 || self.replicas % 2 == 0 {
            return Err(format!("replica count {} must be odd", self.replicas));
        }
        if self.heavy.pages_per_unit() * PAGE_SIZE / BLOCK_SIZE > crate::space::MAX_RUN_BLOCKS as usize * 4 {
            return Err("heavy unit too large".into());
        }
        Ok(())
    }
}

/// Redo progress. `apply` never passes the slowest reader and never
/// decreases.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LsnState {
    pub durable: Lsn,
    pub apply: Lsn,
    pub readers: BTreeMap<u32, Lsn>,
}

impl LsnState {
    /// Highest LSN every reader has reached (the durable LSN with no readers).
    pub fn min_reader(&self) -> Lsn {
        self.readers.values().copied().min().unwrap_or(self.durable)
    }
}

#[derive(Debug, Clone)]
struct Cached {
    rec: RedoRecord,
    offset: u64,
}

#[derive(Debug, Default)]
struct PageLog {
    records: Vec<Cached>,
    bytes: usize,
    last_append: u64,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    run: BlockRun,
    min_lsn: Lsn,
    max_lsn: Lsn,
}

const SLOT_HEADER: usize = 4;

fn encode_slot(recs: &[RedoRecord]) -> Option<Vec<u8>> {
    let used: usize = recs.iter().map(|r| r.encoded_len()).sum();
    if SLOT_HEADER + used > BLOCK_SIZE {
        return None;
    }
    let mut out = Vec::with_capacity(BLOCK_SIZE);
    out.extend_from_slice(&(recs.len() as u16).to_le_bytes());
    out.extend_from_slice(&(used as u16).to_le_bytes());
    for r in recs {
        r.encode_into(&mut out);
    }
    out.resize(BLOCK_SIZE, 0);
    Some(out)
}

fn decode_slot(block: &[u8]) -> Result<Vec<RedoRecord>> {
    let count = u16::from_le_bytes([block[0], block[1]]) as usize;
    let used = u16::from_le_bytes([block[2], block[3]]) as usize;
    if SLOT_HEADER + used > BLOCK_SIZE {
        return Err(StoreError::Corrupt("slot header overflows block".into()));
    }
    let (recs, valid) = redo::scan(&block[SLOT_HEADER..SLOT_HEADER + used]);
    if recs.len() != count || valid != used {
        return Err(StoreError::Corrupt("damaged per-page log slot".into()));
    }
    Ok(recs.into_iter().map(|(_, r)| r).collect())
}

/// Result of an archive request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArchiveReport {
    pub segments: usize,
    pub pages_archived: usize,
    pub pages_skipped: usize,
    pub blocks_before: u64,
    pub blocks_after: u64,
}

/// What survives a crash: the device, the durable parts of both logs, the
/// last checkpoint and the replicas (which live elsewhere).
#[derive(Debug, Clone)]
pub struct DurableState {
    pub device: Csd,
    pub checkpoint: Vec<u8>,
    pub wal: LogDevice,
    pub redo: LogDevice,
    pub replicas: ReplicaSet,
}

pub struct ChunkStore {
    cfg: StoreConfig,
    chunk: ChunkId,
    dev: Csd,
    space: SpaceIndex,
    redo_log: LogDevice,
    replicas: ReplicaSet,
    lsn: LsnState,
    cache: HashMap<PageId, PageLog>,
    cache_bytes: usize,
    append_clock: u64,
    slots: HashMap<PageId, Slot>,
    scattered: HashMap<PageId, Vec<(Lsn, u64, u32)>>,
    /// Log offsets of records not yet reclaimed.
    redo_offsets: BTreeMap<Lsn, u64>,
    last_alg: HashMap<PageId, Algorithm>,
    segment_refs: HashMap<u64, u32>,
    units: UnitBuffer,
    probe: Box<dyn LatencyProbe + Send>,
    metrics: StoreMetrics,
}

impl std::fmt::Debug for ChunkStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChunkStore").field("chunk", &self.chunk).field("lsn", &self.lsn).finish_non_exhaustive()
    }
}

enum Encode {
    Select(SelectionHints),
    Raw,
}

impl ChunkStore {
    /// A fresh store with in-memory logs.
    pub fn new(dev: Csd, cfg: StoreConfig) -> Result<Self> {
        let space = SpaceIndex::new(dev.logical_blocks(), LogDevice::new(cfg.wal_capacity))?;
        let redo = LogDevice::new(cfg.redo_log_capacity);
        let replicas = ReplicaSet::new(cfg.replicas, cfg.replica_seed);
        Self::from_parts(dev, space, redo, replicas, cfg)
    }

    /// Assembles a store from already-open components.
    pub fn from_parts(
        dev: Csd,
        space: SpaceIndex,
        redo_log: LogDevice,
        replicas: ReplicaSet,
        cfg: StoreConfig,
    ) -> Result<Self> {
        cfg.validate().map_err(StoreError::BadRequest)?;
        let mut s = ChunkStore {
            chunk: ChunkId(cfg.chunk),
            units: UnitBuffer::new(cfg.unit_buffer_units),
            cfg,
            dev,
            space,
            redo_log,
            replicas,
            lsn: LsnState::default(),
            cache: HashMap::new(),
            cache_bytes: 0,
            append_clock: 0,
            slots: HashMap::new(),
            scattered: HashMap::new(),
            redo_offsets: BTreeMap::new(),
            last_alg: HashMap::new(),
            segment_refs: HashMap::new(),
            probe: Box::new(ModelLatency::default()),
            metrics: StoreMetrics::default(),
        };
        s.rebuild_volatile()?;
        Ok(s)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Csd {
        &self.dev
    }

    pub fn space(&self) -> &SpaceIndex {
        &self.space
    }

    pub fn redo_log(&self) -> &LogDevice {
        &self.redo_log
    }

    pub fn replicas(&self) -> &ReplicaSet {
        &self.replicas
    }

    pub fn replicas_mut(&mut self) -> &mut ReplicaSet {
        &mut self.replicas
    }

    pub fn metrics(&self) -> &StoreMetrics {
        &self.metrics
    }

    pub fn lsn_state(&self) -> &LsnState {
        &self.lsn
    }

    pub fn set_probe(&mut self, probe: Box<dyn LatencyProbe + Send>) {
        self.probe = probe;
    }

    pub fn set_per_page_log(&mut self, on: bool) {
        self.cfg.per_page_log = on;
    }

    pub fn set_policy(&mut self, policy: CompressionPolicy) {
        self.cfg.policy = policy;
    }

    pub fn index_entry(&self, page: PageId) -> Option<IndexEntry> {
        self.space.index_get(page).ok().copied()
    }

    /// Pages present in the index, in id order.
    pub fn pages(&self) -> Vec<PageId> {
        let mut v: Vec<PageId> = self.space.state().index.keys().copied().collect();
        v.sort();
        v
    }

    /// Blocks currently reserved as per-page log slots.
    pub fn slot_runs(&self) -> Vec<BlockRun> {
        let mut v: Vec<BlockRun> = self.slots.values().map(|s| s.run).collect();
        v.sort();
        v
    }

    /// Pending records for a page: `(cached, in slot, scattered)`.
    pub fn pending_counts(&mut self, page: PageId) -> Result<(usize, usize, usize)> {
        let cached = self.cache.get(&page).map_or(0, |l| l.records.len());
        let slot = match self.slots.get(&page).copied() {
            Some(s) => decode_slot(&self.dev.read_block(s.run.start.0)?)?.len(),
            None => 0,
        };
        let scattered = self.scattered.get(&page).map_or(0, |v| v.len());
        Ok((cached, slot, scattered))
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache_bytes
    }

    /// Device bytes holding this page's stored blocks (its whole segment for
    /// archived pages).
    pub fn stored_bytes(&self, page: PageId) -> u64 {
        let Some(e) = self.index_entry(page) else {
            return 0;
        };
        e.location
            .run()
            .blocks()
            .filter_map(|b| self.dev.mapping(b.0))
            .map(|m| m.length as u64)
            .sum()
    }

    // ---- write path ----

    fn compress(&mut self, page: PageId, data: &[u8], how: Encode) -> Result<CompressedPage> {
        let cp = match how {
            Encode::Raw => CompressedPage::raw(data),
            Encode::Select(hints) => match self.cfg.policy {
                CompressionPolicy::Off => CompressedPage::raw(data),
                CompressionPolicy::Lz4 => {
                    self.metrics.compress_calls += 1;
                    compress_with(data, Algorithm::Lz4)?
                }
                CompressionPolicy::Zstd => {
                    self.metrics.compress_calls += 1;
                    compress_with(data, Algorithm::Zstd)?
                }
                CompressionPolicy::Adaptive => {
                    let last = self.last_alg.get(&page).copied().unwrap_or(Algorithm::Lz4);
                    let (cp, d) = compress_page(data, last, hints, &self.cfg.selector, self.probe.as_ref())?;
                    self.metrics.compress_calls += if d.evaluation.is_some() { 2 } else { 1 };
                    if d.chosen != Algorithm::None {
                        self.last_alg.insert(page, d.chosen);
                    }
                    cp
                }
            },
        };
        match cp.algorithm {
            Algorithm::Lz4 => self.metrics.algo_lz4 += 1,
            Algorithm::Zstd => self.metrics.algo_zstd += 1,
            Algorithm::None => self.metrics.algo_none += 1,
        }
        if cp.algorithm != Algorithm::None {
            self.metrics.compressed_bytes += cp.payload.len() as u64;
        }
        Ok(cp)
    }

    /// Writes `bytes` (padded to whole blocks) into a fresh run.
    fn write_run(&mut self, bytes: &[u8]) -> Result<BlockRun> {
        let n = bytes.len().div_ceil(BLOCK_SIZE) as u32;
        let run = self.space.allocate_blocks(self.chunk, n)?;
        for (i, chunk) in bytes.chunks(BLOCK_SIZE).enumerate() {
            let res = if chunk.len() == BLOCK_SIZE {
                self.dev.write_block(run.start.0 + i as u64, chunk)
            } else {
                let mut b = chunk.to_vec();
                b.resize(BLOCK_SIZE, 0);
                self.dev.write_block(run.start.0 + i as u64, &b)
            };
            if let Err(e) = res {
                self.release_run(run)?;
                return Err(e.into());
            }
            self.metrics.device_writes += 1;
        }
        self.metrics.bytes_out += n as u64 * BLOCK_SIZE as u64;
        Ok(run)
    }

    fn release_run(&mut self, run: BlockRun) -> Result<()> {
        self.space.free_and_trim(run, &self.dev)?;
        Ok(())
    }

    fn release_location(&mut self, loc: Location) -> Result<()> {
        match loc {
            Location::Normal { run, .. } | Location::Raw { run } => self.release_run(run),
            Location::Heavy { segment, .. } => {
                let key = segment.start.0;
                let refs = self.segment_refs.get_mut(&key).expect("archived segment has a refcount");
                *refs -= 1;
                if *refs == 0 {
                    self.segment_refs.remove(&key);
                    self.units.invalidate(key);
                    self.release_run(segment)?;
                }
                Ok(())
            }
        }
    }

    fn replicate(&mut self, op: ReplOp) -> Result<()> {
        match self.replicas.replicate(op) {
            Ok(_) => Ok(()),
            Err(q) => {
                self.metrics.replication_aborts += 1;
                Err(q.into())
            }
        }
    }

    /// Stores a full page image reflecting redo up to `page_lsn` and drops
    /// the records it covers.
    fn store_image(&mut self, page: PageId, data: &[u8], page_lsn: Lsn, how: Encode) -> Result<Lsn> {
        let cp = self.compress(page, data, how)?;
        let run = self.write_run(&cp.payload)?;
        let image = Image::Single { algorithm: cp.algorithm, payload: Arc::new(cp.payload.clone()) };
        if let Err(e) = self.replicate(ReplOp::PageImage { page, lsn: page_lsn, image }) {
            self.release_run(run)?;
            return Err(e);
        }
        let location = match cp.algorithm {
            Algorithm::None => Location::Raw { run },
            _ => Location::Normal { run, header: cp.header() },
        };
        let old = self.index_entry(page);
        self.space.index_put(IndexEntry { page_id: page, page_lsn, location })?;
        if let Some(old) = old {
            self.release_location(old.location)?;
        }
        self.drop_records(page, page_lsn)?;
        self.metrics.page_writes += 1;
        self.metrics.bytes_in += PAGE_SIZE as u64;
        Ok(page_lsn)
    }

    /// Writes a whole page. The image supersedes every pending redo record
    /// for the page. Returns the page's LSN.
    pub fn write_page(&mut self, page: PageId, data: &[u8], mode: WriteMode, hints: SelectionHints) -> Result<Lsn> {
        if data.len() != PAGE_SIZE {
            return Err(StoreError::BadRequest(format!("page write of {} bytes", data.len())));
        }
        let how = match mode {
            WriteMode::Normal => Encode::Select(hints),
            WriteMode::None => Encode::Raw,
            WriteMode::Heavy => return Err(StoreError::BadRequest("heavy mode is only reachable by archiving".into())),
        };
        self.store_image(page, data, self.lsn.durable, how)
    }

    /// Writes a byte range inside a page. The current page is read,
    /// patched and stored uncompressed.
    pub fn write_at(&mut self, page: PageId, offset: usize, data: &[u8]) -> Result<Lsn> {
        if offset + data.len() > PAGE_SIZE {
            return Err(StoreError::BadRequest(format!("write of {} bytes at {offset} past the page", data.len())));
        }
        let mut cur = match self.read_page(page, self.lsn.durable) {
            Ok(p) => p,
            Err(StoreError::NotFound(_)) => vec![0u8; PAGE_SIZE],
            Err(e) => return Err(e),
        };
        cur[offset..offset + data.len()].copy_from_slice(data);
        self.metrics.forced_none += 1;
        self.store_image(page, &cur, self.lsn.durable, Encode::Raw)
    }

    /// Removes a page, freeing and trimming its blocks. A drop record takes
    /// the next redo LSN so recovery does not bring back the page's
    /// earlier records.
    pub fn remove_page(&mut self, page: PageId) -> Result<()> {
        if self.index_entry(page).is_none() {
            return Err(StoreError::NotFound(page));
        }
        self.write_redo(&[RedoRecord::drop_page(self.lsn.durable + 1, page)])?;
        let old = self.space.index_remove(page)?;
        self.release_location(old.location)?;
        self.drop_records(page, Lsn::MAX)?;
        self.last_alg.remove(&page);
        self.space.flush()?;
        Ok(())
    }

    // ---- redo path ----

    /// Appends redo records without compression. They must continue the
    /// LSN sequence. Returns the new durable LSN once a majority holds them.
    pub fn write_redo(&mut self, records: &[RedoRecord]) -> Result<Lsn> {
        let Some(first) = records.first() else {
            return Ok(self.lsn.durable);
        };
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(StoreError::BadRequest)?;
            if r.lsn != first.lsn + i as u64 {
                return Err(StoreError::BadRequest(format!("lsn {} breaks the sequence", r.lsn)));
            }
        }
        if first.lsn != self.lsn.durable + 1 {
            return Err(StoreError::BadRequest(format!(
                "first lsn {} does not follow durable lsn {}",
                first.lsn, self.lsn.durable
            )));
        }
        let mut buf = Vec::with_capacity(records.iter().map(|r| r.encoded_len()).sum());
        let mut offsets = Vec::with_capacity(records.len());
        let start = self.redo_log.end_offset();
        for r in records {
            offsets.push(start + buf.len() as u64);
            r.encode_into(&mut buf);
        }
        if let Err(LogError::Full { .. }) = self.redo_log.append(&buf) {
            self.advance_apply_lsn()?;
            self.redo_log.append(&buf)?;
        }
        if let Err(e) = self.replicate(ReplOp::Redo(Arc::new(records.to_vec()))) {
            self.redo_log.truncate_suffix(start)?;
            return Err(e);
        }
        self.redo_log.flush()?;
        self.lsn.durable = records.last().unwrap().lsn;
        self.metrics.redo_records += records.len() as u64;
        self.metrics.redo_bytes += buf.len() as u64;
        for (r, off) in records.iter().zip(offsets) {
            self.redo_offsets.insert(r.lsn, off);
            if r.kind == RedoKind::Patch {
                self.cache_insert(Cached { rec: r.clone(), offset: off });
            }
        }
        self.enforce_cache_budget()?;
        Ok(self.lsn.durable)
    }

    fn cache_insert(&mut self, c: Cached) {
        self.append_clock += 1;
        let log = self.cache.entry(c.rec.page_id).or_default();
        log.bytes += c.rec.encoded_len();
        log.last_append = self.append_clock;
        self.cache_bytes += c.rec.encoded_len();
        log.records.push(c);
    }

    fn enforce_cache_budget(&mut self) -> Result<()> {
        if self.cache_bytes <= self.cfg.log_cache_budget {
            return Ok(());
        }
        let mut order: Vec<(u64, PageId)> = self.cache.iter().map(|(p, l)| (l.last_append, *p)).collect();
        order.sort();
        for (_, page) in order {
            if self.cache_bytes <= self.cfg.log_cache_budget {
                break;
            }
            self.evict_page(page)?;
        }
        Ok(())
    }

    /// Moves the cached records of the given pages out of memory.
    pub fn evict_logs(&mut self, pages: &[PageId]) -> Result<()> {
        for &p in pages {
            self.evict_page(p)?;
        }
        Ok(())
    }

    /// Evicts every cached page.
    pub fn evict_all(&mut self) -> Result<()> {
        let mut pages: Vec<PageId> = self.cache.keys().copied().collect();
        pages.sort();
        self.evict_logs(&pages)
    }

    fn take_cached(&mut self, page: PageId) -> Vec<Cached> {
        match self.cache.remove(&page) {
            Some(log) => {
                self.cache_bytes -= log.bytes;
                log.records
            }
            None => Vec::new(),
        }
    }

    fn read_slot(&mut self, slot: Slot) -> Result<Vec<RedoRecord>> {
        let block = self.dev.read_block(slot.run.start.0)?;
        self.metrics.device_reads += 1;
        decode_slot(&block)
    }

    /// Writes `recs` into the page's slot, or clears the slot when empty.
    fn write_slot(&mut self, page: PageId, recs: &[RedoRecord]) -> Result<()> {
        if recs.is_empty() {
            if let Some(s) = self.slots.remove(&page) {
                self.release_run(s.run)?;
            }
            return Ok(());
        }
        let bytes = encode_slot(recs).expect("caller checked the slot size");
        let run = match self.slots.get(&page) {
            Some(s) => {
                self.dev.write_block(s.run.start.0, &bytes)?;
                s.run
            }
            None => {
                let run = self.write_run(&bytes)?;
                self.metrics.device_writes -= 1;
                run
            }
        };
        self.metrics.device_writes += 1;
        self.metrics.slot_writes += 1;
        let min_lsn = recs.iter().map(|r| r.lsn).min().unwrap();
        let max_lsn = recs.iter().map(|r| r.lsn).max().unwrap();
        self.slots.insert(page, Slot { run, min_lsn, max_lsn });
        // slots are rebuilt from the redo log after a crash, so losing the
        // quorum here does not lose data
        let _ = self.replicate(ReplOp::SlotWrite { page, bytes: Arc::new(bytes) });
        Ok(())
    }

    fn evict_page(&mut self, page: PageId) -> Result<()> {
        let cached = self.take_cached(page);
        if cached.is_empty() {
            return Ok(());
        }
        if !self.cfg.per_page_log {
            let pos = self.scattered.entry(page).or_default();
            pos.extend(cached.iter().map(|c| (c.rec.lsn, c.offset, c.rec.encoded_len() as u32)));
            return Ok(());
        }
        let mut all = match self.slots.get(&page).copied() {
            Some(s) => self.read_slot(s)?,
            None => Vec::new(),
        };
        all.extend(cached.into_iter().map(|c| c.rec));
        all.sort_by_key(|r| r.lsn);
        if encode_slot(&all).is_some() {
            return self.write_slot(page, &all);
        }
        // overflow: fold what the readers allow into the page and keep the rest
        self.metrics.slot_overflows += 1;
        let target = self.lsn.min_reader();
        let base_lsn = self.index_entry(page).map_or(0, |e| e.page_lsn);
        if all.iter().any(|r| r.lsn > base_lsn && r.lsn <= target) {
            let (mut data, _) = self.load_base(page)?;
            let mut applied = 0;
            for r in all.iter().filter(|r| r.lsn > base_lsn && r.lsn <= target) {
                r.apply(&mut data);
                applied += r.data.len();
            }
            self.metrics.record_log_reads(0);
            self.metrics.consolidations += 1;
            // the slot is about to be rewritten, so clear it before the image
            // write drops records from it
            if let Some(s) = self.slots.remove(&page) {
                self.release_run(s.run)?;
            }
            self.store_image(page, &data, target, Encode::Select(update_hints(applied)))?;
        }
        let rest: Vec<RedoRecord> = all.into_iter().filter(|r| r.lsn > target.max(base_lsn)).collect();
        if encode_slot(&rest).is_some() {
            self.write_slot(page, &rest)
        } else {
            self.write_slot(page, &[])?;
            for r in rest {
                let offset = self.redo_offsets[&r.lsn];
                self.cache_insert(Cached { rec: r, offset });
            }
            Ok(())
        }
    }

    /// Removes pending records for `page` with LSN at or below `upto`.
    fn drop_records(&mut self, page: PageId, upto: Lsn) -> Result<()> {
        if let Some(log) = self.cache.get_mut(&page) {
            let before = log.bytes;
            log.records.retain(|c| c.rec.lsn > upto);
            log.bytes = log.records.iter().map(|c| c.rec.encoded_len()).sum();
            self.cache_bytes -= before - log.bytes;
            if log.records.is_empty() {
                self.cache.remove(&page);
            }
        }
        if let Some(s) = self.slots.get(&page).copied() {
            if s.max_lsn <= upto {
                self.write_slot(page, &[])?;
            } else if s.min_lsn <= upto {
                let recs: Vec<RedoRecord> = self.read_slot(s)?.into_iter().filter(|r| r.lsn > upto).collect();
                self.write_slot(page, &recs)?;
            }
        }
        if let Some(v) = self.scattered.get_mut(&page) {
            v.retain(|(l, _, _)| *l > upto);
            if v.is_empty() {
                self.scattered.remove(&page);
            }
        }
        Ok(())
    }

    // ---- read path ----

    fn read_blocks(&mut self, run: BlockRun) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(run.len as usize * BLOCK_SIZE);
        for b in run.blocks() {
            out.extend_from_slice(&self.dev.read_block(b.0)?);
            self.metrics.device_reads += 1;
        }
        Ok(out)
    }

    /// Base image and its LSN; a zero page at LSN 0 when the page has none.
    fn load_base(&mut self, page: PageId) -> Result<(Vec<u8>, Lsn)> {
        let Some(e) = self.index_entry(page) else {
            return Ok((vec![0u8; PAGE_SIZE], 0));
        };
        let data = match e.location {
            Location::Raw { run } => self.read_blocks(run)?,
            Location::Normal { run, header } => {
                let blocks = self.read_blocks(run)?;
                self.metrics.decompress_calls += 1;
                header.open(&blocks)?
            }
            Location::Heavy { segment, payload_len, crc32, index, page_count } => {
                let key = segment.start.0;
                let before = self.units.decompressions;
                let mut read = None;
                let unit = {
                    let (dev, metrics) = (&self.dev, &mut self.metrics);
                    self.units.get_or_load(key, page_count as usize, || {
                        let mut buf = Vec::with_capacity(segment.len as usize * BLOCK_SIZE);
                        for b in segment.blocks() {
                            buf.extend_from_slice(&dev.read_block(b.0).map_err(|e| CodecError::CorruptPayload(e.to_string()))?);
                            metrics.device_reads += 1;
                        }
                        buf.truncate(payload_len as usize);
                        if CRC32.checksum(&buf) != crc32 {
                            return Err(CodecError::CorruptPayload("archived segment checksum mismatch".into()));
                        }
                        read = Some(segment.len as u64 * BLOCK_SIZE as u64);
                        Ok(buf)
                    })?
                };
                if let Some(bytes) = read {
                    self.metrics.heavy_segment_reads += 1;
                    self.metrics.heavy_amplification_bytes += bytes - bytes / page_count as u64;
                }
                if self.units.decompressions > before {
                    self.metrics.unit_decompressions += 1;
                    self.metrics.decompress_calls += 1;
                } else {
                    self.metrics.unit_buffer_hits += 1;
                }
                let o = index as usize * PAGE_SIZE;
                unit[o..o + PAGE_SIZE].to_vec()
            }
        };
        Ok((data, e.page_lsn))
    }

    /// Pending records for `page` in `(lo, hi]`, sorted, and the number of
    /// log reads it took to find them.
    fn collect_records(&mut self, page: PageId, lo: Lsn, hi: Lsn) -> Result<(Vec<RedoRecord>, u32)> {
        let in_range = |l: Lsn| l > lo && l <= hi;
        let mut recs: Vec<RedoRecord> = self
            .cache
            .get(&page)
            .map(|log| log.records.iter().filter(|c| in_range(c.rec.lsn)).map(|c| c.rec.clone()).collect())
            .unwrap_or_default();
        let mut reads = 0u32;
        if let Some(s) = self.slots.get(&page).copied() {
            if s.max_lsn > lo && s.min_lsn <= hi {
                let from_slot = self.read_slot(s)?;
                reads += 1;
                recs.extend(from_slot.into_iter().filter(|r| in_range(r.lsn)));
            }
        }
        if let Some(pos) = self.scattered.get(&page) {
            let wanted: Vec<(Lsn, u64, u32)> = pos.iter().copied().filter(|(l, _, _)| in_range(*l)).collect();
            let blocks: BTreeSet<u64> = wanted
                .iter()
                .flat_map(|&(_, off, len)| off / BLOCK_SIZE as u64..=(off + len as u64 - 1) / BLOCK_SIZE as u64)
                .collect();
            let (base, end) = (self.redo_log.base_offset(), self.redo_log.durable_end());
            for b in &blocks {
                let s = (b * BLOCK_SIZE as u64).max(base);
                let e = ((b + 1) * BLOCK_SIZE as u64).min(end);
                self.redo_log.read_at(s, e - s)?;
                reads += 1;
            }
            let durable = self.redo_log.durable_bytes();
            for (_, off, len) in wanted {
                let at = (off - base) as usize;
                match redo::decode(&durable[at..at + len as usize]) {
                    redo::Decoded::Record(r, _) => recs.push(r),
                    _ => return Err(StoreError::Corrupt(format!("redo record at {off} unreadable"))),
                }
            }
        }
        self.metrics.log_reads += reads as u64;
        recs.sort_by_key(|r| r.lsn);
        Ok((recs, reads))
    }

    fn has_pending(&self, page: PageId) -> bool {
        self.cache.contains_key(&page) || self.slots.contains_key(&page) || self.scattered.contains_key(&page)
    }

    /// The page as of `at_lsn`: its stored image with every pending record
    /// up to `at_lsn` applied.
    pub fn read_page(&mut self, page: PageId, at_lsn: Lsn) -> Result<Vec<u8>> {
        if at_lsn > self.lsn.durable {
            return Err(StoreError::FutureLsn { requested: at_lsn, durable: self.lsn.durable });
        }
        if self.index_entry(page).is_none() && !self.has_pending(page) {
            return Err(StoreError::NotFound(page));
        }
        self.metrics.page_reads += 1;
        let (mut data, base_lsn) = self.load_base(page)?;
        let (recs, reads) = self.collect_records(page, base_lsn, at_lsn)?;
        if !recs.is_empty() || reads > 0 {
            self.metrics.record_log_reads(reads);
        }
        for r in &recs {
            r.apply(&mut data);
        }
        Ok(data)
    }

    // ---- consolidation ----

    pub fn register_reader(&mut self, id: u32, lsn: Lsn) -> Result<()> {
        if lsn < self.lsn.apply || lsn > self.lsn.durable {
            return Err(StoreError::BadRequest(format!(
                "reader lsn {lsn} outside [{}, {}]",
                self.lsn.apply, self.lsn.durable
            )));
        }
        self.lsn.readers.insert(id, lsn);
        Ok(())
    }

    pub fn remove_reader(&mut self, id: u32) {
        self.lsn.readers.remove(&id);
    }

    /// Materializes `page` up to `target` if it has records at or below it.
    fn consolidate_to(&mut self, page: PageId, target: Lsn) -> Result<bool> {
        let base_lsn = self.index_entry(page).map_or(0, |e| e.page_lsn);
        if target <= base_lsn {
            return Ok(false);
        }
        let (recs, reads) = self.collect_records(page, base_lsn, target)?;
        if recs.is_empty() {
            return Ok(false);
        }
        let (mut data, _) = self.load_base(page)?;
        let mut applied = 0;
        for r in &recs {
            r.apply(&mut data);
            applied += r.data.len();
        }
        self.metrics.record_log_reads(reads);
        self.metrics.consolidations += 1;
        self.store_image(page, &data, target, Encode::Select(update_hints(applied)))?;
        Ok(true)
    }

    /// Folds the page's pending records up to the slowest reader into its
    /// stored image.
    pub fn consolidate(&mut self, page: PageId) -> Result<bool> {
        self.consolidate_to(page, self.lsn.min_reader())
    }

    /// Consolidates every page up to the slowest reader and reclaims the
    /// redo log below it. Returns the new apply LSN.
    pub fn advance_apply_lsn(&mut self) -> Result<Lsn> {
        let target = self.lsn.min_reader().max(self.lsn.apply);
        let mut pages: BTreeSet<PageId> = BTreeSet::new();
        for (p, log) in &self.cache {
            if log.records.iter().any(|c| c.rec.lsn <= target) {
                pages.insert(*p);
            }
        }
        pages.extend(self.slots.iter().filter(|(_, s)| s.min_lsn <= target).map(|(p, _)| *p));
        pages.extend(self.scattered.iter().filter(|(_, v)| v.iter().any(|(l, _, _)| *l <= target)).map(|(p, _)| *p));
        for p in pages {
            self.consolidate_to(p, target)?;
        }
        self.lsn.apply = target;
        let keep = self.redo_offsets.split_off(&(target + 1));
        self.redo_offsets = keep;
        let cut = self.redo_offsets.values().next().copied().unwrap_or(self.redo_log.end_offset());
        self.redo_log.flush()?;
        self.redo_log.truncate_prefix(cut, target)?;
        Ok(target)
    }

    // ---- archival ----

    /// Recompresses pages as multi-page units. Pages are brought up to the
    /// slowest reader first; groups that would take more blocks than they
    /// occupy now are left alone.
    pub fn archive_range(&mut self, pages: &[PageId]) -> Result<ArchiveReport> {
        for &p in pages {
            if self.index_entry(p).is_none() && !self.has_pending(p) {
                return Err(StoreError::NotFound(p));
            }
        }
        let mut seen = BTreeSet::new();
        if let Some(p) = pages.iter().find(|p| !seen.insert(**p)) {
            return Err(StoreError::BadRequest(format!("{p} listed twice")));
        }
        let target = self.lsn.min_reader();
        let mut report = ArchiveReport::default();
        for group in pages.chunks(self.cfg.heavy.pages_per_unit()) {
            let mut datas = Vec::with_capacity(group.len());
            let mut lsns = Vec::with_capacity(group.len());
            let mut before = 0.0f64;
            for &p in group {
                let entry = self.index_entry(p);
                let base_lsn = entry.map_or(0, |e| e.page_lsn);
                let at = target.max(base_lsn);
                let (mut data, _) = self.load_base(p)?;
                let (recs, reads) = self.collect_records(p, base_lsn, at)?;
                if !recs.is_empty() {
                    self.metrics.record_log_reads(reads);
                }
                for r in &recs {
                    r.apply(&mut data);
                }
                before += match entry.map(|e| e.location) {
                    Some(Location::Heavy { segment, page_count, .. }) => segment.len as f64 / page_count as f64,
                    Some(l) => l.run().len as f64,
                    None => 0.0,
                };
                datas.push(data);
                lsns.push(at);
            }
            let refs: Vec<&[u8]> = datas.iter().map(|d| d.as_slice()).collect();
            let seg = build_heavy_segment(&refs, &self.cfg.heavy)?;
            self.metrics.compress_calls += 1;
            let blocks = seg.padded_len() / BLOCK_SIZE;
            if blocks > crate::space::MAX_RUN_BLOCKS as usize || blocks as f64 > before {
                report.pages_skipped += group.len();
                continue;
            }
            let payload = Arc::new(seg.payload);
            let run = self.write_run(&payload)?;
            let members: Vec<(PageId, Lsn)> = group.iter().copied().zip(lsns.iter().copied()).collect();
            if let Err(e) = self.replicate(ReplOp::Archive { members, payload: payload.clone() }) {
                self.release_run(run)?;
                return Err(e);
            }
            let crc32 = CRC32.checksum(&payload);
            self.segment_refs.insert(run.start.0, group.len() as u32);
            for (i, (&p, &lsn)) in group.iter().zip(&lsns).enumerate() {
                let location = Location::Heavy {
                    segment: run,
                    payload_len: payload.len() as u32,
                    crc32,
                    index: i as u16,
                    page_count: group.len() as u16,
                };
                let old = self.index_entry(p);
                self.space.index_put(IndexEntry { page_id: p, page_lsn: lsn, location })?;
                if let Some(old) = old {
                    self.release_location(old.location)?;
                }
                self.drop_records(p, lsn)?;
            }
            self.metrics.heavy_segments_written += 1;
            self.metrics.compressed_bytes += payload.len() as u64;
            report.segments += 1;
            report.pages_archived += group.len();
            report.blocks_before += before.round() as u64;
            report.blocks_after += blocks as u64;
        }
        Ok(report)
    }

    // ---- durability ----

    pub fn checkpoint(&mut self) -> Result<Lsn> {
        Ok(self.space.checkpoint()?)
    }

    /// Flushes buffered WAL records.
    pub fn sync(&mut self) -> Result<()> {
        self.space.flush()?;
        self.redo_log.flush()?;
        Ok(())
    }

    /// Simulates power loss. Buffered log bytes are lost except for torn
    /// prefixes of the given lengths.
    pub fn crash(self, wal_tear: usize, redo_tear: usize) -> DurableState {
        let mut redo = self.redo_log;
        redo.crash(redo_tear);
        let (checkpoint, wal) = self.space.crash(wal_tear);
        DurableState { device: self.dev, checkpoint, wal, redo, replicas: self.replicas }
    }

    /// Rebuilds a store from what survived a crash.
    pub fn recover(state: DurableState, cfg: StoreConfig) -> Result<Self> {
        let space = SpaceIndex::recover(&state.checkpoint, state.wal)?;
        Self::from_parts(state.device, space, state.redo, state.replicas, cfg)
    }

    /// Reconciles volatile state with the durable index and redo log:
    /// releases orphaned blocks (including old slots), trims device blocks
    /// no allocation covers, and reloads pending redo records into memory.
    fn rebuild_volatile(&mut self) -> Result<()> {
        for run in self.space.reclaim_orphans(&[])? {
            self.dev.trim(run.start.0, run.len as u64);
        }
        for lba in self.dev.mapped_lbas() {
            if !self.space.state().alloc.is_allocated(lba) {
                self.dev.trim(lba, 1);
            }
        }
        let base = self.redo_log.base_offset();
        let (recs, valid) = redo::scan(self.redo_log.durable_bytes());
        if valid < self.redo_log.durable_bytes().len() {
            self.redo_log.truncate_suffix(base + valid as u64)?;
        }
        let apply = self.redo_log.meta();
        let mut durable = apply;
        for (pos, r) in recs {
            if r.lsn <= apply {
                continue;
            }
            if r.lsn != durable + 1 {
                return Err(StoreError::Corrupt(format!("redo lsn {} follows {durable}", r.lsn)));
            }
            durable = r.lsn;
            if r.kind == RedoKind::Drop {
                self.take_cached(r.page_id);
            }
            let offset = base + pos as u64;
            self.redo_offsets.insert(r.lsn, offset);
            let page_lsn = self.index_entry(r.page_id).map_or(0, |e| e.page_lsn);
            if r.kind == RedoKind::Patch && r.lsn > page_lsn {
                self.cache_insert(Cached { rec: r, offset });
            }
        }
        let entries: Vec<IndexEntry> = self.space.state().index.values().copied().collect();
        for e in entries {
            durable = durable.max(e.page_lsn);
            match e.location {
                Location::Heavy { segment, .. } => *self.segment_refs.entry(segment.start.0).or_default() += 1,
                Location::Normal { header, .. } => {
                    self.last_alg.insert(e.page_id, header.algorithm);
                }
                Location::Raw { .. } => {}
            }
        }
        self.lsn = LsnState { durable, apply, readers: BTreeMap::new() };
        Ok(())
    }
}

fn update_hints(applied_bytes: usize) -> SelectionHints {
    SelectionHints { cpu_utilization: 0.0, update_fraction: applied_bytes as f64 / PAGE_SIZE as f64 }
}

/// Hints for a fresh page image: nothing is known about it, so both
/// algorithms are evaluated.
pub fn initial_hints() -> SelectionHints {
    SelectionHints { cpu_utilization: 0.0, update_fraction: 1.0 }
}

#[cfg(test)]
mod tests;
