//! Two-level block allocator: device-wide 128 KB extents handed out to
//! chunks, and a per-chunk bitmap of 4 KB blocks inside the owned extents.

use std::collections::{BTreeMap, BTreeSet};

use super::SpaceError;
use crate::{BlockRun, ChunkId, BLOCKS_PER_EXTENT};

const EXT: u64 = BLOCKS_PER_EXTENT as u64;
pub const MAX_RUN_BLOCKS: u32 = 256;

/// Blocks owned by one chunk. Extents are kept in acquisition order; the
/// last one is the newest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkBitmap {
    pub extents: Vec<(u32, u32)>,
}

impl ChunkBitmap {
    fn position(&self, extent: u32) -> Option<usize> {
        self.extents.iter().position(|(e, _)| *e == extent)
    }

    pub fn popcount(&self) -> u32 {
        self.extents.iter().map(|(_, b)| b.count_ones()).sum()
    }
}

fn mask(lo: u32, len: u32) -> u32 {
    if len >= 32 {
        u32::MAX
    } else {
        ((1u32 << len) - 1) << lo
    }
}

/// Lowest bit position where `n` consecutive zero bits start.
fn first_fit(bits: u32, n: u32) -> Option<u32> {
    (0..=32 - n).find(|&p| bits & mask(p, n) == 0)
}

/// Splits a run into per-extent pieces `(extent, first bit, bit count)`.
fn pieces(run: BlockRun) -> impl Iterator<Item = (u32, u32, u32)> {
    let mut at = run.start.0;
    let end = run.end();
    std::iter::from_fn(move || {
        if at >= end {
            return None;
        }
        let extent = at / EXT;
        let lo = at % EXT;
        let hi = (end - extent * EXT).min(EXT);
        at = extent * EXT + hi;
        Some((extent as u32, lo as u32, (hi - lo) as u32))
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocator {
    total_extents: u32,
    free: BTreeSet<u32>,
    owner: BTreeMap<u32, ChunkId>,
    chunks: BTreeMap<ChunkId, ChunkBitmap>,
}

impl Allocator {
    pub fn new(total_extents: u32) -> Self {
        Allocator {
            total_extents,
            free: (0..total_extents).collect(),
            owner: BTreeMap::new(),
            chunks: BTreeMap::new(),
        }
    }

    pub fn total_extents(&self) -> u32 {
        self.total_extents
    }

    pub fn free_extents(&self) -> usize {
        self.free.len()
    }

    pub fn chunks(&self) -> &BTreeMap<ChunkId, ChunkBitmap> {
        &self.chunks
    }

    pub fn chunk(&self, chunk: ChunkId) -> Option<&ChunkBitmap> {
        self.chunks.get(&chunk)
    }

    pub fn owned_extents(&self) -> usize {
        self.owner.len()
    }

    /// Picks a run for `n` blocks without changing any state.
    pub fn plan(&self, chunk: ChunkId, n: u32) -> Result<BlockRun, SpaceError> {
        if n == 0 || n > MAX_RUN_BLOCKS {
            return Err(SpaceError::BadRequest(format!("run of {n} blocks outside 1..=256")));
        }
        if n as u64 <= EXT {
            if let Some(bm) = self.chunks.get(&chunk) {
                for &(extent, bits) in bm.extents.iter().rev() {
                    if let Some(p) = first_fit(bits, n) {
                        return Ok(BlockRun::new(extent as u64 * EXT + p as u64, n));
                    }
                }
            }
            let extent = *self.free.first().ok_or(SpaceError::OutOfLogicalSpace)?;
            return Ok(BlockRun::new(extent as u64 * EXT, n));
        }
        let k = (n as u64).div_ceil(EXT) as u32;
        self.free
            .iter()
            .find(|&&e| (e..e + k).all(|x| self.free.contains(&x)))
            .map(|&e| BlockRun::new(e as u64 * EXT, n))
            .ok_or(SpaceError::OutOfLogicalSpace)
    }

    /// Marks a run allocated to `chunk`, acquiring unowned extents it touches.
    pub fn apply_alloc(&mut self, chunk: ChunkId, run: BlockRun) -> Result<(), SpaceError> {
        for (extent, lo, len) in pieces(run) {
            if extent >= self.total_extents {
                return Err(SpaceError::BadRequest(format!("run {run} past the last extent")));
            }
            match self.owner.get(&extent) {
                Some(c) if *c != chunk => {
                    return Err(SpaceError::Conflict(format!("extent {extent} owned by chunk {}", c.0)))
                }
                Some(_) => {
                    let bm = &self.chunks[&chunk];
                    let bits = bm.extents[bm.position(extent).unwrap()].1;
                    if bits & mask(lo, len) != 0 {
                        return Err(SpaceError::Conflict(format!("run {run} overlaps allocated blocks")));
                    }
                }
                None => {}
            }
        }
        for (extent, lo, len) in pieces(run) {
            let bm = self.chunks.entry(chunk).or_default();
            let pos = match bm.position(extent) {
                Some(p) => p,
                None => {
                    self.free.remove(&extent);
                    self.owner.insert(extent, chunk);
                    bm.extents.push((extent, 0));
                    bm.extents.len() - 1
                }
            };
            bm.extents[pos].1 |= mask(lo, len);
        }
        Ok(())
    }

    /// Clears a run; extents left empty go back to the free list.
    pub fn apply_free(&mut self, chunk: ChunkId, run: BlockRun) -> Result<(), SpaceError> {
        let double = || SpaceError::DoubleFree(run);
        let bm = self.chunks.get(&chunk).ok_or_else(double)?;
        for (extent, lo, len) in pieces(run) {
            let pos = bm.position(extent).ok_or_else(double)?;
            let m = mask(lo, len);
            if bm.extents[pos].1 & m != m {
                return Err(double());
            }
        }
        let bm = self.chunks.get_mut(&chunk).unwrap();
        for (extent, lo, len) in pieces(run) {
            let pos = bm.position(extent).unwrap();
            bm.extents[pos].1 &= !mask(lo, len);
            if bm.extents[pos].1 == 0 {
                bm.extents.remove(pos);
                self.owner.remove(&extent);
                self.free.insert(extent);
            }
        }
        if bm.extents.is_empty() {
            self.chunks.remove(&chunk);
        }
        Ok(())
    }

    pub fn owner_of(&self, run: BlockRun) -> Option<ChunkId> {
        self.owner.get(&((run.start.0 / EXT) as u32)).copied()
    }

    pub fn is_allocated(&self, block: u64) -> bool {
        let extent = (block / EXT) as u32;
        let Some(c) = self.owner.get(&extent) else {
            return false;
        };
        let bm = &self.chunks[c];
        let bits = bm.extents[bm.position(extent).unwrap()].1;
        bits & (1 << (block % EXT)) != 0
    }

    /// Allocated blocks of a chunk as maximal runs, in address order, each
    /// no longer than one extent.
    pub fn allocated_runs(&self, chunk: ChunkId) -> Vec<BlockRun> {
        let Some(bm) = self.chunks.get(&chunk) else {
            return Vec::new();
        };
        let mut ext: Vec<(u32, u32)> = bm.extents.clone();
        ext.sort();
        let mut out = Vec::new();
        for (extent, bits) in ext {
            let mut b = 0u32;
            while b < 32 {
                if bits & (1 << b) == 0 {
                    b += 1;
                    continue;
                }
                let start = b;
                while b < 32 && bits & (1 << b) != 0 {
                    b += 1;
                }
                out.push(BlockRun::new(extent as u64 * EXT + start as u64, b - start));
            }
        }
        out
    }

    pub fn allocated_blocks(&self) -> u64 {
        self.chunks.values().map(|c| c.popcount() as u64).sum()
    }

    /// Restores the allocator from serialized chunk bitmaps.
    pub(crate) fn from_parts(total_extents: u32, chunks: BTreeMap<ChunkId, ChunkBitmap>) -> Result<Self, String> {
        let mut a = Allocator::new(total_extents);
        for (c, bm) in &chunks {
            for &(e, bits) in &bm.extents {
                if e >= total_extents || bits == 0 || a.owner.insert(e, *c).is_some() {
                    return Err(format!("bad extent {e} for chunk {}", c.0));
                }
                a.free.remove(&e);
            }
        }
        a.chunks = chunks;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: ChunkId = ChunkId(0);

    fn alloc(a: &mut Allocator, c: ChunkId, n: u32) -> BlockRun {
        let run = a.plan(c, n).unwrap();
        a.apply_alloc(c, run).unwrap();
        run
    }

    #[test]
    fn four_blocks_on_fresh_chunk() {
        let mut a = Allocator::new(8);
        assert_eq!(alloc(&mut a, C, 4), BlockRun::new(0, 4));
        assert_eq!(a.free_extents(), 7);
    }

    #[test]
    fn thirty_two_singles_fill_one_extent() {
        let mut a = Allocator::new(8);
        for i in 0..32 {
            assert_eq!(alloc(&mut a, C, 1), BlockRun::new(i, 1));
        }
        assert_eq!(a.owned_extents(), 1);
        assert_eq!(alloc(&mut a, C, 1), BlockRun::new(32, 1));
        assert_eq!(a.owned_extents(), 2);
    }

    #[test]
    fn newest_extent_first_then_older() {
        let mut a = Allocator::new(8);
        let r0 = alloc(&mut a, C, 30);
        let _r1 = alloc(&mut a, C, 30);
        // both extents have 2 free blocks; the newest one is used first
        assert_eq!(alloc(&mut a, C, 2), BlockRun::new(62, 2));
        a.apply_free(C, BlockRun::new(r0.start.0 + 5, 3)).unwrap();
        assert_eq!(alloc(&mut a, C, 3), BlockRun::new(5, 3));
    }

    #[test]
    fn large_runs_take_contiguous_extents() {
        let mut a = Allocator::new(16);
        alloc(&mut a, C, 1);
        let run = alloc(&mut a, C, 100);
        assert_eq!(run, BlockRun::new(32, 100));
        assert_eq!(a.owned_extents(), 5);
        a.apply_free(C, run).unwrap();
        assert_eq!(a.owned_extents(), 1);
        assert_eq!(a.free_extents(), 15);
    }

    #[test]
    fn double_free_detected() {
        let mut a = Allocator::new(4);
        let r = alloc(&mut a, C, 4);
        a.apply_free(C, r).unwrap();
        assert!(matches!(a.apply_free(C, r), Err(SpaceError::DoubleFree(_))));
        let r = alloc(&mut a, C, 4);
        assert!(matches!(a.apply_free(C, BlockRun::new(r.start.0, 5)), Err(SpaceError::DoubleFree(_))));
    }

    #[test]
    fn exhaustion() {
        let mut a = Allocator::new(2);
        alloc(&mut a, C, 32);
        alloc(&mut a, C, 32);
        assert!(matches!(a.plan(C, 1), Err(SpaceError::OutOfLogicalSpace)));
        assert!(matches!(a.plan(C, 0), Err(SpaceError::BadRequest(_))));
        assert!(matches!(a.plan(C, 257), Err(SpaceError::BadRequest(_))));
    }

    #[test]
    fn chunks_do_not_share_extents() {
        let mut a = Allocator::new(4);
        let r = alloc(&mut a, ChunkId(1), 1);
        let s = alloc(&mut a, ChunkId(2), 1);
        assert_ne!(r.start.0 / 32, s.start.0 / 32);
        assert!(a.apply_alloc(ChunkId(2), BlockRun::new(1, 1)).is_err());
        assert_eq!(a.owner_of(r), Some(ChunkId(1)));
    }

    #[test]
    fn allocated_runs_are_maximal() {
        let mut a = Allocator::new(4);
        alloc(&mut a, C, 5);
        alloc(&mut a, C, 3);
        a.apply_free(C, BlockRun::new(2, 1)).unwrap();
        assert_eq!(a.allocated_runs(C), vec![BlockRun::new(0, 2), BlockRun::new(3, 5)]);
        assert_eq!(a.allocated_blocks(), 7);
    }
}
