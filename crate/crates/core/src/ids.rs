use std::fmt;

/// Log sequence number.
pub type Lsn = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ChunkId(pub u32);

/// Index of a 4 KB logical block on the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockAddr(pub u64);

/// A contiguous run of logical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockRun {
    pub start: BlockAddr,
    pub len: u32,
}

impl BlockRun {
    pub fn new(start: u64, len: u32) -> Self {
        BlockRun { start: BlockAddr(start), len }
    }

    pub fn end(&self) -> u64 {
        self.start.0 + self.len as u64
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockAddr> {
        (self.start.0..self.end()).map(BlockAddr)
    }

    pub fn contains(&self, addr: BlockAddr) -> bool {
        addr.0 >= self.start.0 && addr.0 < self.end()
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "page#{}", self.0)
    }
}

impl fmt::Display for BlockAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lba#{}", self.0)
    }
}

impl fmt::Display for BlockRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}..{})", self.start.0, self.end())
    }
}
