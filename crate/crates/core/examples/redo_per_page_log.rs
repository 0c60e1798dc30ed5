//! Redo records bypass compression and, once evicted, are gathered into a
//! per-page log slot so a page can be materialized with one log read.

use dualstore::csd::{Csd, DeviceConfig};
use dualstore::space::WriteMode;
use dualstore::store::{initial_hints, ChunkStore, RedoRecord, StoreConfig};
use dualstore::workload::{record_page, RecordKind};
use dualstore::PageId;

fn log_reads(per_page_log: bool) -> Result<u64, Box<dyn std::error::Error>> {
    let cfg = StoreConfig { per_page_log, ..StoreConfig::default() };
    let mut s = ChunkStore::new(Csd::new(DeviceConfig::default())?, cfg)?;
    for p in 0..8 {
        s.write_page(PageId(p), &record_page(RecordKind::Orders, p), WriteMode::Normal, initial_hints())?;
    }
    let calls = s.metrics().compress_calls;
    let mut lsn = 0;
    for round in 0..12u16 {
        for p in 0..8 {
            lsn += 1;
            s.write_redo(&[RedoRecord::patch(lsn, PageId(p), 200 + round * 40, vec![round as u8; 300])])?;
        }
        // evicting after every round spreads a page's records over the log
        s.evict_all()?;
    }
    assert_eq!(s.metrics().compress_calls, calls, "redo never touches the codec");
    let before = s.metrics().log_reads;
    let page = s.read_page(PageId(3), lsn)?;
    assert_eq!(page[200 + 11 * 40], 11);
    Ok(s.metrics().log_reads - before)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("12 evicted records for one page");
    println!("  per-page slot:   {} log read(s)", log_reads(true)?);
    println!("  scattered in log: {} log read(s)", log_reads(false)?);
    Ok(())
}
