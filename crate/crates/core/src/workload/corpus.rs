//! Compression accounting over a directory of files cut into pages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codec::{
    build_heavy_segment, compress_page, compress_with, padded_len, Algorithm, CompressedPage, HeavyConfig,
    ModelLatency, SelectorConfig,
};
use crate::csd::{stored_block_len, EntryFormat};
use crate::store::initial_hints;
use crate::{BLOCK_SIZE, PAGE_SIZE};

use super::gen::{record_page, RecordKind};
use super::WorkloadError;

/// Directory of the corpus shipped with the crate.
pub fn bundled_corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Reads every regular file in `dir` in name order and cuts it into 16 KB
/// pages, zero-padding the last page of each file.
pub fn load_corpus(dir: &Path) -> Result<Vec<Vec<u8>>, WorkloadError> {
    let missing = || WorkloadError::MissingCorpus(dir.to_path_buf());
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| missing())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut pages = Vec::new();
    for f in files {
        let data = std::fs::read(&f)?;
        for c in data.chunks(PAGE_SIZE) {
            let mut p = c.to_vec();
            p.resize(PAGE_SIZE, 0);
            pages.push(p);
        }
    }
    if pages.is_empty() {
        return Err(missing());
    }
    Ok(pages)
}

/// Synthetic table pages written to `records.bin` by the `gen_corpus`
/// example: orders and profiles, interleaved.
pub fn record_corpus(pages_per_kind: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 * pages_per_kind as usize * PAGE_SIZE);
    for s in 0..pages_per_kind {
        out.extend(record_page(RecordKind::Orders, s));
        out.extend(record_page(RecordKind::Profiles, s));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pipeline {
    Lz4Only,
    ZstdOnly,
    Adaptive,
    /// zstd over multi-page units, as archiving does.
    Heavy,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::Lz4Only, Pipeline::ZstdOnly, Pipeline::Adaptive, Pipeline::Heavy];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Lz4Only => "lz4",
            Pipeline::ZstdOnly => "zstd",
            Pipeline::Adaptive => "adaptive",
            Pipeline::Heavy => "heavy",
        }
    }
}

/// Device parameters used to account for the second compression layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub deflate_level: u32,
    pub entry_format: EntryFormat,
    pub selector: SelectorConfig,
    pub heavy: HeavyConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            deflate_level: 5,
            entry_format: EntryFormat::V2,
            selector: SelectorConfig::default(),
            heavy: HeavyConfig::default(),
        }
    }
}

/// Byte totals for one pipeline over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub pipeline: Pipeline,
    pub pages: usize,
    pub logical: u64,
    /// Software payload bytes, as a byte-granular index would store them.
    pub software_bytes: u64,
    /// Software payloads rounded up to whole 4 KB blocks.
    pub software_aligned: u64,
    /// Bytes the device keeps after deflating the padded payload blocks.
    pub dual_layer: u64,
    /// Bytes the device keeps for the raw pages, with no software layer.
    pub hardware_only: u64,
    /// Per-page minimum of the lz4 and zstd 4 KB-aligned sizes.
    pub min_per_page_aligned: u64,
    pub lz4_pages: usize,
    pub zstd_pages: usize,
    pub raw_pages: usize,
}

impl CorpusReport {
    fn ratio(&self, n: u64) -> f64 {
        self.logical as f64 / n as f64
    }

    pub fn software_ratio(&self) -> f64 {
        self.ratio(self.software_bytes)
    }

    pub fn aligned_ratio(&self) -> f64 {
        self.ratio(self.software_aligned)
    }

    pub fn dual_ratio(&self) -> f64 {
        self.ratio(self.dual_layer)
    }

    pub fn hardware_ratio(&self) -> f64 {
        self.ratio(self.hardware_only)
    }

    /// How much more space 4 KB-aligned accounting takes than byte-granular.
    pub fn aligned_overhead(&self) -> f64 {
        (self.software_aligned as f64 - self.software_bytes as f64) / self.software_bytes as f64
    }
}

fn device_bytes(payload: &[u8], cfg: &ReportConfig) -> u64 {
    let mut padded = payload.to_vec();
    padded.resize(padded_len(payload.len()), 0);
    padded.chunks(BLOCK_SIZE).map(|b| stored_block_len(b, cfg.deflate_level, cfg.entry_format) as u64).sum()
}

pub fn corpus_report(pages: &[Vec<u8>], pipeline: Pipeline, cfg: &ReportConfig) -> Result<CorpusReport, WorkloadError> {
    let mut r = CorpusReport {
        pipeline,
        pages: pages.len(),
        logical: (pages.len() * PAGE_SIZE) as u64,
        software_bytes: 0,
        software_aligned: 0,
        dual_layer: 0,
        hardware_only: 0,
        min_per_page_aligned: 0,
        lz4_pages: 0,
        zstd_pages: 0,
        raw_pages: 0,
    };
    let add = |r: &mut CorpusReport, payload: &[u8]| {
        r.software_bytes += payload.len() as u64;
        r.software_aligned += padded_len(payload.len()) as u64;
        r.dual_layer += device_bytes(payload, cfg);
    };
    let probe = ModelLatency::default();
    for p in pages {
        r.hardware_only += device_bytes(p, cfg);
        let lz = compress_with(p, Algorithm::Lz4)?;
        let zs = compress_with(p, Algorithm::Zstd)?;
        r.min_per_page_aligned += lz.padded_len().min(zs.padded_len()) as u64;
        let chosen: CompressedPage = match pipeline {
            Pipeline::Lz4Only => lz,
            Pipeline::ZstdOnly => zs,
            Pipeline::Adaptive => compress_page(p, Algorithm::None, initial_hints(), &cfg.selector, &probe)?.0,
            Pipeline::Heavy => continue,
        };
        match chosen.algorithm {
            Algorithm::Lz4 => r.lz4_pages += 1,
            Algorithm::Zstd => r.zstd_pages += 1,
            Algorithm::None => r.raw_pages += 1,
        }
        add(&mut r, &chosen.payload);
    }
    if pipeline == Pipeline::Heavy {
        for group in pages.chunks(cfg.heavy.pages_per_unit()) {
            let refs: Vec<&[u8]> = group.iter().map(|p| p.as_slice()).collect();
            let seg = build_heavy_segment(&refs, &cfg.heavy)?;
            r.zstd_pages += group.len();
            add(&mut r, &seg.payload);
        }
    }
    Ok(r)
}

/// Reports for every pipeline.
pub fn corpus_reports(pages: &[Vec<u8>], cfg: &ReportConfig) -> Result<Vec<CorpusReport>, WorkloadError> {
    Pipeline::ALL.iter().map(|&p| corpus_report(pages, p, cfg)).collect()
}

/// zstd's storage advantage over lz4, `(lz4 - zstd) / zstd`, at the software
/// layer (byte-granular) and after the device layer.
pub fn zstd_advantage(lz4: &CorpusReport, zstd: &CorpusReport) -> (f64, f64) {
    let adv = |a: u64, b: u64| (a as f64 - b as f64) / b as f64;
    (adv(lz4.software_bytes, zstd.software_bytes), adv(lz4.dual_layer, zstd.dual_layer))
}

pub fn format_reports(reports: &[CorpusReport]) -> String {
    let mut out = format!(
        "{:<9} {:>6} {:>11} {:>11} {:>11} {:>11} {:>11} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
        "pipeline", "pages", "logical", "soft_bytes", "soft_4k", "dual", "hw_only", "r_soft", "r_4k", "r_dual", "r_hw", "4k_over%"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<9} {:>6} {:>11} {:>11} {:>11} {:>11} {:>11} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>9.2}",
            r.pipeline.name(),
            r.pages,
            r.logical,
            r.software_bytes,
            r.software_aligned,
            r.dual_layer,
            r.hardware_only,
            r.software_ratio(),
            r.aligned_ratio(),
            r.dual_ratio(),
            r.hardware_ratio(),
            100.0 * r.aligned_overhead()
        );
    }
    for r in reports {
        let _ = writeln!(
            out,
            "#DATA corpus pipeline={} pages={} logical={} software_bytes={} software_aligned={} dual_layer={} hardware_only={} min_per_page_aligned={} lz4_pages={} zstd_pages={} raw_pages={}",
            r.pipeline.name(),
            r.pages,
            r.logical,
            r.software_bytes,
            r.software_aligned,
            r.dual_layer,
            r.hardware_only,
            r.min_per_page_aligned,
            r.lz4_pages,
            r.zstd_pages,
            r.raw_pages
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::gen::{generate_page, CompressibilitySpec, Generator};

    fn mixed(n: u64) -> Vec<Vec<u8>> {
        (0..n)
            .map(|i| match i % 3 {
                0 => record_page(RecordKind::Orders, i),
                1 => record_page(RecordKind::Profiles, i),
                _ => generate_page(&CompressibilitySpec::new(Generator::TextMix, 1.0, 5), i),
            })
            .collect()
    }

    #[test]
    fn alignment_never_saves_space() {
        let pages = mixed(12);
        for r in corpus_reports(&pages, &ReportConfig::default()).unwrap() {
            assert!(r.software_bytes <= r.software_aligned, "{r:?}");
            assert_eq!(r.pages, 12);
        }
    }

    #[test]
    fn adaptive_close_to_per_page_minimum() {
        let pages = mixed(30);
        let r = corpus_report(&pages, Pipeline::Adaptive, &ReportConfig::default()).unwrap();
        assert!(r.software_aligned as f64 <= r.min_per_page_aligned as f64 * 1.03, "{r:?}");
        assert_eq!(r.lz4_pages + r.zstd_pages + r.raw_pages, 30);
    }

    #[test]
    fn missing_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(&dir.path().join("nope")), Err(WorkloadError::MissingCorpus(_))));
        assert!(matches!(load_corpus(dir.path()), Err(WorkloadError::MissingCorpus(_))));
        std::fs::write(dir.path().join("a"), vec![1u8; PAGE_SIZE + 1]).unwrap();
        let pages = load_corpus(dir.path()).unwrap();
        assert_eq!(pages.len(), 2);
        assert_eq!(pages[1][0], 1);
        assert!(pages[1][1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn random_pages_stay_raw() {
        let pages: Vec<Vec<u8>> = (0..3).map(|i| generate_page(&CompressibilitySpec::random(2), i)).collect();
        let r = corpus_report(&pages, Pipeline::Lz4Only, &ReportConfig::default()).unwrap();
        assert_eq!(r.raw_pages, 3);
        assert_eq!(r.software_aligned, r.logical);
        assert_eq!(r.hardware_only, r.logical);
    }
}
