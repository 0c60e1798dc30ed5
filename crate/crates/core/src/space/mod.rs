//! Durable page index and block allocation.
//!
//! [`SpaceIndex`] maps page ids to block locations and owns the two-level
//! allocator. Every mutation is written to a WAL on the fast log device
//! before it becomes visible; allocation records are group-committed and
//! index updates force a flush, which is the acknowledgment point for the
//! callers. A checkpoint serializes the whole state and resets the WAL.

mod alloc;
pub mod wal;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use alloc::{Allocator, ChunkBitmap, MAX_RUN_BLOCKS};
pub use wal::{WalKind, WalRecord};

use crate::codec::{Algorithm, PageHeader};
use crate::csd::Csd;
use crate::fastlog::{LogDevice, LogError};
use crate::{BlockRun, ChunkId, Lsn, PageId, BLOCKS_PER_EXTENT};

use wal::CRC32;

/// Bytes buffered before the WAL is flushed without an explicit commit.
pub const GROUP_COMMIT_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("no free extent left for the request")]
    OutOfLogicalSpace,
    #[error("run {0} is not fully allocated")]
    DoubleFree(BlockRun),
    #[error("page {0} not in index")]
    NotFound(PageId),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("allocation conflict: {0}")]
    Conflict(String),
    #[error("corrupt WAL: {0}")]
    CorruptWal(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum WriteMode {
    Normal,
    None,
    Heavy,
}

/// Where a page's bytes live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    /// Compressed payload padded to whole blocks.
    Normal { run: BlockRun, header: PageHeader },
    /// Uncompressed page in four blocks.
    Raw { run: BlockRun },
    /// Member of a multi-page compression unit stored at `segment`.
    Heavy { segment: BlockRun, payload_len: u32, crc32: u32, index: u16, page_count: u16 },
}

impl Location {
    pub fn mode(&self) -> WriteMode {
        match self {
            Location::Normal { .. } => WriteMode::Normal,
            Location::Raw { .. } => WriteMode::None,
            Location::Heavy { .. } => WriteMode::Heavy,
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Location::Normal { header, .. } => header.algorithm,
            Location::Raw { .. } => Algorithm::None,
            Location::Heavy { .. } => Algorithm::Zstd,
        }
    }

    /// Block run holding the stored bytes (the whole segment for members).
    pub fn run(&self) -> BlockRun {
        match *self {
            Location::Normal { run, .. } | Location::Raw { run } => run,
            Location::Heavy { segment, .. } => segment,
        }
    }

    pub fn payload_len(&self) -> u32 {
        match self {
            Location::Normal { header, .. } => header.payload_len as u32,
            Location::Raw { .. } => crate::PAGE_SIZE as u32,
            Location::Heavy { payload_len, .. } => *payload_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexEntry {
    pub page_id: PageId,
    /// Redo LSN the stored image reflects.
    pub page_lsn: Lsn,
    pub location: Location,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn run(&mut self) -> Result<BlockRun, String> {
        Ok(BlockRun::new(self.u64()?, self.u32()?))
    }
    fn done(&self) -> Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_run(out: &mut Vec<u8>, run: BlockRun) {
    out.extend_from_slice(&run.start.0.to_le_bytes());
    out.extend_from_slice(&run.len.to_le_bytes());
}

impl IndexEntry {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.page_id.0.to_le_bytes());
        out.extend_from_slice(&self.page_lsn.to_le_bytes());
        match self.location {
            Location::Normal { run, header } => {
                out.push(0);
                put_run(out, run);
                out.extend_from_slice(&header.encode());
            }
            Location::Raw { run } => {
                out.push(1);
                put_run(out, run);
            }
            Location::Heavy { segment, payload_len, crc32, index, page_count } => {
                out.push(2);
                put_run(out, segment);
                out.extend_from_slice(&payload_len.to_le_bytes());
                out.extend_from_slice(&crc32.to_le_bytes());
                out.extend_from_slice(&index.to_le_bytes());
                out.extend_from_slice(&page_count.to_le_bytes());
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, String> {
        let page_id = PageId(r.u64()?);
        let page_lsn = r.u64()?;
        let location = match r.u8()? {
            0 => {
                let run = r.run()?;
                let header = PageHeader::decode(r.take(PageHeader::LEN)?).map_err(|e| e.to_string())?;
                Location::Normal { run, header }
            }
            1 => Location::Raw { run: r.run()? },
            2 => Location::Heavy {
                segment: r.run()?,
                payload_len: r.u32()?,
                crc32: r.u32()?,
                index: r.u16()?,
                page_count: r.u16()?,
            },
            t => return Err(format!("unknown location tag {t}")),
        };
        Ok(IndexEntry { page_id, page_lsn, location })
    }
}

/// The recoverable state: allocator, index and the last applied WAL lsn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceState {
    pub lsn: Lsn,
    pub alloc: Allocator,
    pub index: HashMap<PageId, IndexEntry>,
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u16 = 1;

impl SpaceState {
    pub fn new(total_extents: u32) -> Self {
        SpaceState { lsn: 0, alloc: Allocator::new(total_extents), index: HashMap::new() }
    }

    fn apply(&mut self, rec: &WalRecord) -> Result<(), String> {
        let mut r = Reader::new(&rec.payload);
        match rec.kind {
            WalKind::Alloc | WalKind::Free => {
                let chunk = ChunkId(r.u32()?);
                let run = r.run()?;
                r.done()?;
                let res = if rec.kind == WalKind::Alloc {
                    self.alloc.apply_alloc(chunk, run)
                } else {
                    self.alloc.apply_free(chunk, run)
                };
                res.map_err(|e| e.to_string())?;
            }
            WalKind::IndexUpdate => match r.u8()? {
                1 => {
                    let e = IndexEntry::decode_from(&mut r)?;
                    r.done()?;
                    self.index.insert(e.page_id, e);
                }
                2 => {
                    let id = PageId(r.u64()?);
                    r.done()?;
                    self.index.remove(&id).ok_or_else(|| format!("remove of unmapped {id}"))?;
                }
                op => return Err(format!("unknown index op {op}")),
            },
            WalKind::Checkpoint => {}
        }
        self.lsn = rec.lsn;
        Ok(())
    }

    /// Deterministic snapshot.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.lsn.to_le_bytes());
        out.extend_from_slice(&self.alloc.total_extents().to_le_bytes());
        out.extend_from_slice(&(self.alloc.chunks().len() as u32).to_le_bytes());
        for (c, bm) in self.alloc.chunks() {
            out.extend_from_slice(&c.0.to_le_bytes());
            out.extend_from_slice(&(bm.extents.len() as u32).to_le_bytes());
            for (e, bits) in &bm.extents {
                out.extend_from_slice(&e.to_le_bytes());
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
        let mut entries: Vec<&IndexEntry> = self.index.values().collect();
        entries.sort_by_key(|e| e.page_id);
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for e in entries {
            e.encode_into(&mut out);
        }
        let crc = CRC32.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self, SpaceError> {
        let bad = SpaceError::CorruptCheckpoint;
        if buf.len() < 8 {
            return Err(bad("too short".into()));
        }
        let (body, crc) = buf.split_at(buf.len() - 4);
        if CRC32.checksum(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(bad("checksum mismatch".into()));
        }
        let parse = || -> Result<SpaceState, String> {
            let mut r = Reader::new(body);
            if r.take(4)? != CKPT_MAGIC {
                return Err("bad magic".into());
            }
            let v = r.u16()?;
            if v != CKPT_VERSION {
                return Err(format!("unsupported version {v}"));
            }
            r.u16()?;
            let lsn = r.u64()?;
            let total = r.u32()?;
            let mut chunks = BTreeMap::new();
            for _ in 0..r.u32()? {
                let c = ChunkId(r.u32()?);
                let mut bm = ChunkBitmap::default();
                for _ in 0..r.u32()? {
                    bm.extents.push((r.u32()?, r.u32()?));
                }
                chunks.insert(c, bm);
            }
            let alloc = Allocator::from_parts(total, chunks)?;
            let mut index = HashMap::new();
            for _ in 0..r.u64()? {
                let e = IndexEntry::decode_from(&mut r)?;
                index.insert(e.page_id, e);
            }
            r.done()?;
            Ok(SpaceState { lsn, alloc, index })
        };
        parse().map_err(bad)
    }

    /// Blocks referenced by index entries.
    pub fn referenced_blocks(&self) -> BTreeSet<u64> {
        let mut set = BTreeSet::new();
        for e in self.index.values() {
            set.extend(e.location.run().blocks().map(|b| b.0));
        }
        set
    }

    /// Checks the structural invariants: no block referenced twice (members
    /// of one unit share its run), and every referenced block allocated.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut owner: HashMap<u64, BlockRun> = HashMap::new();
        for e in self.index.values() {
            let run = e.location.run();
            let shared = matches!(e.location, Location::Heavy { .. });
            for b in run.blocks() {
                if !self.alloc.is_allocated(b.0) {
                    return Err(format!("{} references unallocated block {}", e.page_id, b.0));
                }
                if let Some(prev) = owner.insert(b.0, run) {
                    if !(shared && prev == run) {
                        return Err(format!("block {} referenced twice", b.0));
                    }
                }
            }
        }
        let used = self.alloc.owned_extents() + self.alloc.free_extents();
        if used != self.alloc.total_extents() as usize {
            return Err("extent conservation violated".into());
        }
        Ok(())
    }
}

/// Index, allocator and WAL for one device.
#[derive(Debug)]
pub struct SpaceIndex {
    state: SpaceState,
    wal: LogDevice,
    checkpoint: Vec<u8>,
    checkpoint_path: Option<PathBuf>,
}

impl SpaceIndex {
    /// Fresh index covering `logical_blocks` device blocks.
    pub fn new(logical_blocks: u64, wal: LogDevice) -> Result<Self, SpaceError> {
        let total = (logical_blocks / BLOCKS_PER_EXTENT as u64) as u32;
        let mut s = SpaceIndex { state: SpaceState::new(total), wal, checkpoint: Vec::new(), checkpoint_path: None };
        s.checkpoint()?;
        Ok(s)
    }

    /// Persists checkpoints to `path` from now on.
    pub fn with_checkpoint_file(mut self, path: &Path) -> Result<Self, SpaceError> {
        self.checkpoint_path = Some(path.to_path_buf());
        self.write_checkpoint_file()?;
        Ok(self)
    }

    fn write_checkpoint_file(&self) -> Result<(), SpaceError> {
        if let Some(p) = &self.checkpoint_path {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, &self.checkpoint)?;
            std::fs::rename(&tmp, p)?;
        }
        Ok(())
    }

    pub fn state(&self) -> &SpaceState {
        &self.state
    }

    pub fn wal(&self) -> &LogDevice {
        &self.wal
    }

    pub fn checkpoint_bytes(&self) -> &[u8] {
        &self.checkpoint
    }

    fn log(&mut self, kind: WalKind, payload: Vec<u8>) -> Result<Lsn, SpaceError> {
        let rec = WalRecord { lsn: self.state.lsn + 1, kind, payload };
        let bytes = rec.encode();
        match self.wal.append(&bytes) {
            Ok(_) => {}
            Err(LogError::Full { .. }) => {
                // the snapshot below includes everything logged so far
                self.checkpoint()?;
                self.wal.append(&bytes)?;
            }
            Err(e) => return Err(e.into()),
        }
        self.state.apply(&rec).map_err(SpaceError::CorruptWal)?;
        if self.wal.pending_len() >= GROUP_COMMIT_BYTES {
            self.wal.flush()?;
        }
        Ok(rec.lsn)
    }

    fn run_payload(chunk: ChunkId, run: BlockRun) -> Vec<u8> {
        let mut p = Vec::with_capacity(16);
        p.extend_from_slice(&chunk.0.to_le_bytes());
        put_run(&mut p, run);
        p
    }

    /// Allocates a contiguous run of `n` blocks for `chunk`.
    pub fn allocate_blocks(&mut self, chunk: ChunkId, n: u32) -> Result<BlockRun, SpaceError> {
        let run = self.state.alloc.plan(chunk, n)?;
        self.log(WalKind::Alloc, Self::run_payload(chunk, run))?;
        Ok(run)
    }

    /// Releases a run. The device is not touched; see [`Self::free_and_trim`].
    pub fn free_blocks(&mut self, run: BlockRun) -> Result<(), SpaceError> {
        let chunk = self.state.alloc.owner_of(run).ok_or(SpaceError::DoubleFree(run))?;
        // validate before logging so a bad free leaves no record
        let mut probe = self.state.alloc.clone();
        probe.apply_free(chunk, run)?;
        self.log(WalKind::Free, Self::run_payload(chunk, run))?;
        Ok(())
    }

    /// Releases a run and trims its blocks on the device.
    pub fn free_and_trim(&mut self, run: BlockRun, dev: &Csd) -> Result<(), SpaceError> {
        self.free_blocks(run)?;
        dev.trim(run.start.0, run.len as u64);
        Ok(())
    }

    /// Logs and commits an index entry; returns once the WAL is durable.
    pub fn index_put(&mut self, entry: IndexEntry) -> Result<Lsn, SpaceError> {
        let mut p = vec![1u8];
        entry.encode_into(&mut p);
        let lsn = self.log(WalKind::IndexUpdate, p)?;
        self.wal.flush()?;
        Ok(lsn)
    }

    pub fn index_get(&self, page: PageId) -> Result<&IndexEntry, SpaceError> {
        self.state.index.get(&page).ok_or(SpaceError::NotFound(page))
    }

    pub fn index_remove(&mut self, page: PageId) -> Result<IndexEntry, SpaceError> {
        let old = *self.index_get(page)?;
        let mut p = vec![2u8];
        p.extend_from_slice(&page.0.to_le_bytes());
        self.log(WalKind::IndexUpdate, p)?;
        self.wal.flush()?;
        Ok(old)
    }

    pub fn flush(&mut self) -> Result<(), SpaceError> {
        self.wal.flush()?;
        Ok(())
    }

    /// Snapshots the state and resets the WAL to a single checkpoint record.
    pub fn checkpoint(&mut self) -> Result<Lsn, SpaceError> {
        self.checkpoint = self.state.to_checkpoint_bytes();
        self.write_checkpoint_file()?;
        let rec = WalRecord { lsn: self.state.lsn, kind: WalKind::Checkpoint, payload: Vec::new() };
        self.wal.reset(&rec.encode(), self.state.lsn)?;
        Ok(self.state.lsn)
    }

    /// Rebuilds from a checkpoint and the durable WAL. A torn tail is cut
    /// from the log so later appends follow the last good record.
    pub fn recover(checkpoint: &[u8], mut wal: LogDevice) -> Result<Self, SpaceError> {
        let mut state = SpaceState::from_checkpoint_bytes(checkpoint)?;
        let base = state.lsn;
        let scan = wal::scan(wal.durable_bytes())?;
        for rec in &scan.records {
            if rec.kind == WalKind::Checkpoint {
                if rec.lsn > base {
                    return Err(SpaceError::CorruptWal(format!(
                        "checkpoint record at lsn {} is newer than the snapshot at {base}",
                        rec.lsn
                    )));
                }
                continue;
            }
            if rec.lsn <= base {
                continue;
            }
            if rec.lsn != state.lsn + 1 {
                return Err(SpaceError::CorruptWal(format!("lsn gap: {} after {}", rec.lsn, state.lsn)));
            }
            state.apply(rec).map_err(SpaceError::CorruptWal)?;
        }
        if scan.torn {
            let end = wal.base_offset() + scan.valid_len as u64;
            wal.truncate_suffix(end)?;
        }
        Ok(SpaceIndex { state, wal, checkpoint: checkpoint.to_vec(), checkpoint_path: None })
    }

    /// Recovers from a checkpoint file and a file-backed WAL.
    pub fn recover_files(checkpoint: &Path, wal: LogDevice) -> Result<Self, SpaceError> {
        let bytes = std::fs::read(checkpoint)?;
        let mut s = Self::recover(&bytes, wal)?;
        s.checkpoint_path = Some(checkpoint.to_path_buf());
        Ok(s)
    }

    /// Frees every allocated block not referenced by the index or by
    /// `keep`. Returns the runs released.
    pub fn reclaim_orphans(&mut self, keep: &[BlockRun]) -> Result<Vec<BlockRun>, SpaceError> {
        let mut referenced = self.state.referenced_blocks();
        for r in keep {
            referenced.extend(r.blocks().map(|b| b.0));
        }
        let chunks: Vec<ChunkId> = self.state.alloc.chunks().keys().copied().collect();
        let mut freed = Vec::new();
        for c in chunks {
            for run in self.state.alloc.allocated_runs(c) {
                let mut start = None;
                for b in run.start.0..=run.end() {
                    let orphan = b < run.end() && !referenced.contains(&b);
                    match (orphan, start) {
                        (true, None) => start = Some(b),
                        (false, Some(s)) => {
                            freed.push(BlockRun::new(s, (b - s) as u32));
                            start = None;
                        }
                        _ => {}
                    }
                }
            }
        }
        for r in &freed {
            self.free_blocks(*r)?;
        }
        self.wal.flush()?;
        Ok(freed)
    }

    /// Simulates a crash: returns the durable checkpoint and the WAL with
    /// its buffer dropped (keeping a torn prefix of `tear` bytes).
    pub fn crash(mut self, tear: usize) -> (Vec<u8>, LogDevice) {
        self.wal.crash(tear);
        (self.checkpoint, self.wal)
    }
}
