//! Storage totals of each compression pipeline on the bundled corpus, at the
//! software layer and after the device's own compression.

use dualstore::workload::{bundled_corpus_dir, corpus_reports, format_reports, load_corpus, zstd_advantage, ReportConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(bundled_corpus_dir);
    let pages = load_corpus(&dir)?;
    let reports = corpus_reports(&pages, &ReportConfig::default())?;
    print!("{}", format_reports(&reports));
    let (soft, dual) = zstd_advantage(&reports[0], &reports[1]);
    println!("zstd advantage over lz4: software {:.1}%, dual layer {:.1}%", 100.0 * soft, 100.0 * dual);
    Ok(())
}
