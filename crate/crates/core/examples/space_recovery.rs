//! Extent allocation, the page index WAL, and recovery after a torn write.

use dualstore::codec::{compress_with, Algorithm};
use dualstore::csd::{Csd, DeviceConfig};
use dualstore::fastlog::LogDevice;
use dualstore::space::{IndexEntry, Location, SpaceIndex};
use dualstore::workload::{record_page, RecordKind};
use dualstore::{ChunkId, PageId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dev = Csd::new(DeviceConfig::default())?;
    let mut space = SpaceIndex::new(dev.logical_blocks(), LogDevice::new(1 << 20))?;
    for i in 0..20u64 {
        let cp = compress_with(&record_page(RecordKind::Orders, i), Algorithm::Lz4)?;
        let run = space.allocate_blocks(ChunkId(0), cp.block_count() as u32)?;
        let location = Location::Normal { run, header: cp.header() };
        space.index_put(IndexEntry { page_id: PageId(i), page_lsn: 0, location })?;
        if i == 9 {
            space.checkpoint()?;
        }
    }
    // an allocation that never reached the index
    let orphan = space.allocate_blocks(ChunkId(0), 3)?;
    space.flush()?;
    let before = space.state().clone();

    let (checkpoint, wal) = space.crash(7);
    let mut back = SpaceIndex::recover(&checkpoint, wal)?;
    println!("recovered {} index entries, wal lsn {}", back.state().index.len(), back.state().lsn);
    assert_eq!(back.state(), &before);
    let freed = back.reclaim_orphans(&[])?;
    println!("orphaned runs released: {freed:?} (expected {orphan:?})");
    println!("allocated blocks: {}", back.state().alloc.allocated_blocks());
    Ok(())
}
