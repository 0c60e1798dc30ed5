//! Writes the synthetic table pages of the bundled corpus to
//! `corpus/records.bin` (or the given path).

use dualstore::workload::{bundled_corpus_dir, record_corpus};

fn main() -> std::io::Result<()> {
    let path = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| bundled_corpus_dir().join("records.bin"));
    let bytes = record_corpus(75);
    std::fs::write(&path, &bytes)?;
    println!("wrote {} pages to {}", bytes.len() / dualstore::PAGE_SIZE, path.display());
    Ok(())
}
