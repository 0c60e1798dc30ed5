//! Thin provisioning on the simulated device: 80 MiB of logical space over
//! 32 MiB of flash, filled with data that compresses about 2.5x.

use dualstore::csd::{Csd, DeviceConfig};
use dualstore::workload::{generate_page, CompressibilitySpec, Generator};
use dualstore::BLOCK_SIZE;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dev = Csd::new(DeviceConfig::default())?;
    let spec = CompressibilitySpec::new(Generator::RepeatFill, 2.5, 42);

    let mut lba = 0;
    for i in 0..256 {
        for block in generate_page(&spec, i).chunks(BLOCK_SIZE) {
            dev.write_block(lba, block)?;
            lba += 1;
        }
    }
    let s = dev.device_stats();
    println!("wrote {lba} blocks");
    println!("logical_used  {:>10}", s.logical_used);
    println!("physical_live {:>10}", s.physical_live);
    println!("ratio         {:>10.3}", s.logical_used as f64 / s.physical_live as f64);
    if let Some(e) = dev.mapping(0) {
        println!("lba 0 -> segment {} offset {} length {} raw {}", e.segment, e.offset, e.length, e.raw);
    }

    // overwrite half, trim a quarter, then collect garbage
    for l in 0..lba / 2 {
        dev.write_block(l, &generate_page(&spec, 1000 + l)[..BLOCK_SIZE])?;
    }
    dev.trim(lba / 2, lba / 4);
    let before = dev.device_stats();
    let moved = dev.run_gc();
    let after = dev.device_stats();
    println!("gc moved {moved} bytes; physical_used {} -> {}", before.physical_used, after.physical_used);

    assert_eq!(dev.read_block(0)?, generate_page(&spec, 1000)[..BLOCK_SIZE]);
    println!("reads verified");
    Ok(())
}
