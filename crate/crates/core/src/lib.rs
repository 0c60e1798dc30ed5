//! A dual-layer compressed page store.
//!
//! Pages of 16 KB are compressed in software into runs of 4 KB blocks and
//! written to a simulated computational storage device ([`csd::Csd`]) that
//! compresses every 4 KB block again and maps it to a byte-granular physical
//! location. On top of that sit the database-facing optimizations: redo log
//! writes that bypass compression, adaptive lz4/zstd selection per page, and
//! per-page log slots that bound consolidation to a single log read.
//!
//! The [`scheduler`] module is a standalone simulator for compression-aware
//! chunk placement across a cluster, and [`workload`] holds the data
//! generators, trace runner and corpus report used by the examples and tests.

pub mod codec;
pub mod csd;
pub mod engine;
pub mod fastlog;
pub mod scheduler;
pub mod space;
pub mod store;
pub mod workload;

mod ids;

pub use ids::{BlockAddr, BlockRun, ChunkId, Lsn, PageId};

/// Logical block size exposed by the device.
pub const BLOCK_SIZE: usize = 4096;
/// Database page size.
pub const PAGE_SIZE: usize = 16384;
/// Blocks per page when stored uncompressed.
pub const BLOCKS_PER_PAGE: usize = PAGE_SIZE / BLOCK_SIZE;
/// Granularity of the device-wide extent allocator.
pub const EXTENT_SIZE: usize = 131072;
/// Blocks per extent.
pub const BLOCKS_PER_EXTENT: usize = EXTENT_SIZE / BLOCK_SIZE;
