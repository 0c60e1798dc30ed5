//! The two L2P entry layouts and what the 16-byte grid costs in space.

use dualstore::csd::{decode_entry, encode_entry, stored_block_len, EntryFormat, L2PEntry};
use dualstore::workload::{generate_page, CompressibilitySpec, Generator};
use dualstore::BLOCK_SIZE;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let e = L2PEntry { segment: 7, offset: 4096 * 3 + 160, length: 1488, raw: false };
    for f in [EntryFormat::V1, EntryFormat::V2] {
        let bytes = encode_entry(&e, f)?;
        println!("{f:?}: {} bytes {:02x?} -> {:?}", bytes.len(), bytes, decode_entry(&bytes, f)?);
    }
    let odd = L2PEntry { offset: 4096 + 5, ..e };
    println!("V2 rejects an unaligned offset: {}", encode_entry(&odd, EntryFormat::V2).unwrap_err());

    let spec = CompressibilitySpec::new(Generator::TextMix, 1.0, 3);
    let (mut v1, mut v2) = (0u64, 0u64);
    for i in 0..64 {
        for b in generate_page(&spec, i).chunks(BLOCK_SIZE) {
            v1 += stored_block_len(b, 5, EntryFormat::V1) as u64;
            v2 += stored_block_len(b, 5, EntryFormat::V2) as u64;
        }
    }
    println!("stored bytes for 256 text blocks: V1 {v1}, V2 {v2} (+{:.2}%)", 100.0 * (v2 - v1) as f64 / v1 as f64);
    Ok(())
}
