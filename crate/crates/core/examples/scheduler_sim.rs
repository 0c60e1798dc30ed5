//! Compression-aware chunk placement on the bundled 100-node population.

use dualstore::scheduler::{
    format_step, parse_population, simulate, sweep, wasted_space, SchedulerConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = parse_population(include_str!("../data/population.toml"))?;
    let cluster = spec.build()?;
    let c_avg = cluster.c_avg();
    let w = wasted_space(&cluster);
    println!("c_avg {c_avg:.3}; {} nodes below, {} above", w.below_avg_nodes, w.above_avg_nodes);
    println!("stranded: {:.2}% logical, {:.2}% physical", w.logical_pct, w.physical_pct);

    let cfg = SchedulerConfig::around(c_avg, 0.1);
    let sim = simulate(&spec, &cfg, 6)?;
    for r in &sim.reports {
        println!("{}", format_step(r));
    }

    println!("range sweep:");
    let candidates: Vec<(f64, f64)> = [0.05, 0.1, 0.15].iter().map(|s| (c_avg * (1.0 - s), c_avg * (1.0 + s))).collect();
    for row in sweep(&spec, &candidates, 4)? {
        println!("  [{:.3}, {:.3}] moves={} in_range={:.3}", row.c_l, row.c_h, row.moves, row.in_range);
    }
    Ok(())
}
