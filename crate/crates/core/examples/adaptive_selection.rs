//! Per-page choice between lz4 and zstd under different CPU and update
//! conditions.

use dualstore::codec::{compress_page, Algorithm, FixedLatency, ModelLatency, SelectionHints, SelectorConfig};
use dualstore::workload::{generate_page, record_page, CompressibilitySpec, Generator, RecordKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SelectorConfig::default();
    let pages = [
        ("orders", record_page(RecordKind::Orders, 1)),
        ("profiles", record_page(RecordKind::Profiles, 1)),
        ("text", generate_page(&CompressibilitySpec::new(Generator::TextMix, 1.0, 1), 0)),
        ("random", generate_page(&CompressibilitySpec::random(1), 0)),
    ];
    let cases = [
        ("idle, rewritten", SelectionHints { cpu_utilization: 0.05, update_fraction: 0.9 }),
        ("busy cpu", SelectionHints { cpu_utilization: 0.5, update_fraction: 0.9 }),
        ("small update", SelectionHints { cpu_utilization: 0.05, update_fraction: 0.1 }),
    ];
    let model = ModelLatency::default();
    for (name, page) in &pages {
        for (label, hints) in cases {
            let (cp, d) = compress_page(page, Algorithm::Lz4, hints, &cfg, &model)?;
            let ev = d.evaluation.map_or(String::new(), |e| {
                format!(" benefit={}B overhead={:.2}us", e.benefit(), e.overhead())
            });
            println!("{name:<9} {label:<16} {:?} -> {:?} ({} bytes){ev}", d.branch, d.stored, cp.payload.len());
        }
    }

    // with equal latencies any block saved is enough for zstd
    let flat = FixedLatency { lz4_us: 5.0, zstd_us: 5.0 };
    let hints = SelectionHints { cpu_utilization: 0.0, update_fraction: 1.0 };
    let (_, d) = compress_page(&pages[0].1, Algorithm::Lz4, hints, &cfg, &flat)?;
    println!("equal latencies: {:?}", d.chosen);
    Ok(())
}
