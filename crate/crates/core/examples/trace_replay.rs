//! Replays a trace file against an in-memory store and prints the metrics.
//! Defaults to the bundled acceptance trace.

use dualstore::csd::{Csd, DeviceConfig};
use dualstore::store::{ChunkStore, StoreConfig};
use dualstore::workload::{format_metrics, parse_trace, run_trace, CompressibilitySpec, Generator, TraceConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(p) => std::fs::read_to_string(p)?,
        None => include_str!("../data/acceptance.trace").to_string(),
    };
    let ops = parse_trace(&text)?;
    let store = ChunkStore::new(Csd::new(DeviceConfig::default())?, StoreConfig::default())?;
    let tc = TraceConfig::new(CompressibilitySpec::new(Generator::TextMix, 1.0, 0));
    let (_, m) = run_trace(store, &ops, &tc)?;
    print!("{}", format_metrics(&m));
    Ok(())
}
