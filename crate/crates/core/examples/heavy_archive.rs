//! Archiving cold pages into 1 MiB zstd units and the read amplification
//! that follows.

use dualstore::csd::{Csd, DeviceConfig};
use dualstore::space::WriteMode;
use dualstore::store::{initial_hints, ChunkStore, StoreConfig};
use dualstore::workload::{record_page, RecordKind};
use dualstore::PageId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut store = ChunkStore::new(Csd::new(DeviceConfig::default())?, StoreConfig::default())?;
    let pages: Vec<PageId> = (0..128).map(PageId).collect();
    let data = |p: PageId| record_page(if p.0 % 2 == 0 { RecordKind::Orders } else { RecordKind::Profiles }, p.0);
    for &p in &pages {
        store.write_page(p, &data(p), WriteMode::Normal, initial_hints())?;
    }
    let normal = store.device().device_stats().physical_live;

    let r = store.archive_range(&pages)?;
    // members share their segment, so count the device once
    let heavy = store.device().device_stats().physical_live;
    println!("{r:?}");
    println!("device bytes: normal {normal}, archived {heavy}");

    let lsn = store.lsn_state().durable;
    assert_eq!(store.read_page(PageId(77), lsn)?, data(PageId(77)));
    assert_eq!(store.read_page(PageId(78), lsn)?, data(PageId(78)));
    let m = store.metrics();
    println!(
        "2 reads: segment_reads={} unit_decompressions={} buffer_hits={} amplification={} bytes",
        m.heavy_segment_reads, m.unit_decompressions, m.unit_buffer_hits, m.heavy_amplification_bytes
    );
    Ok(())
}
