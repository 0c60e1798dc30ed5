//! Per-page choice between lz4 and zstd.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{decompress_payload, lz4_compress, padded_len, zstd_compress, Algorithm, CodecError, CompressedPage, ZSTD_FAST_LEVEL};
use crate::PAGE_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Bytes saved per extra microsecond of decompression needed to pick zstd.
    pub benefit_per_overhead_threshold: f64,
    pub cpu_utilization_ceiling: f64,
    pub update_fraction_trigger: f64,
    /// Read latency saved per 4 KB of avoided I/O. Reported only.
    pub io_latency_saving_per_4k: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            benefit_per_overhead_threshold: 300.0,
            cpu_utilization_ceiling: 0.20,
            update_fraction_trigger: 0.30,
            io_latency_saving_per_4k: 13.0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.benefit_per_overhead_threshold > 0.0) {
            return Err(format!("benefit_per_overhead_threshold {} must be > 0", self.benefit_per_overhead_threshold));
        }
        for (name, v) in [
            ("cpu_utilization_ceiling", self.cpu_utilization_ceiling),
            ("update_fraction_trigger", self.update_fraction_trigger),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectionHints {
    pub cpu_utilization: f64,
    pub update_fraction: f64,
}

/// Source of decompression latencies used by the selector.
pub trait LatencyProbe {
    /// Microseconds to decompress `payload` back into a page.
    fn decompress_latency_us(&self, algorithm: Algorithm, payload: &[u8]) -> f64;
}

/// Times an actual decompression. Results vary between runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WallClockProbe;

impl LatencyProbe for WallClockProbe {
    fn decompress_latency_us(&self, algorithm: Algorithm, payload: &[u8]) -> f64 {
        let t = Instant::now();
        let _ = decompress_payload(algorithm, payload);
        t.elapsed().as_secs_f64() * 1e6
    }
}

/// Returns the same latency for every payload of an algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedLatency {
    pub lz4_us: f64,
    pub zstd_us: f64,
}

impl LatencyProbe for FixedLatency {
    fn decompress_latency_us(&self, algorithm: Algorithm, _payload: &[u8]) -> f64 {
        match algorithm {
            Algorithm::Lz4 => self.lz4_us,
            Algorithm::Zstd => self.zstd_us,
            Algorithm::None => 0.0,
        }
    }
}

/// Deterministic linear latency model: a fixed setup cost plus a cost per
/// KB of compressed input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelLatency {
    pub lz4_base_us: f64,
    pub lz4_us_per_kb: f64,
    pub zstd_base_us: f64,
    pub zstd_us_per_kb: f64,
}

impl Default for ModelLatency {
    fn default() -> Self {
        ModelLatency { lz4_base_us: 1.0, lz4_us_per_kb: 0.2, zstd_base_us: 2.0, zstd_us_per_kb: 0.7 }
    }
}

impl LatencyProbe for ModelLatency {
    fn decompress_latency_us(&self, algorithm: Algorithm, payload: &[u8]) -> f64 {
        let kb = payload.len() as f64 / 1024.0;
        match algorithm {
            Algorithm::Lz4 => self.lz4_base_us + self.lz4_us_per_kb * kb,
            Algorithm::Zstd => self.zstd_base_us + self.zstd_us_per_kb * kb,
            Algorithm::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// CPU above the ceiling: lz4 without evaluation.
    CpuCeiling,
    /// Both algorithms compressed and compared.
    Evaluated,
    /// Neither trigger fired: previous algorithm reused.
    ReuseLast,
}

/// Measurements taken when both candidates are compressed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub lz4_padded: u64,
    pub zstd_padded: u64,
    pub lz4_latency_us: f64,
    pub zstd_latency_us: f64,
}

impl Evaluation {
    /// Bytes zstd saves after 4 KB alignment (may be negative).
    pub fn benefit(&self) -> i64 {
        self.lz4_padded as i64 - self.zstd_padded as i64
    }

    /// Extra microseconds zstd costs to decompress (may be negative).
    pub fn overhead(&self) -> f64 {
        self.zstd_latency_us - self.lz4_latency_us
    }
}

/// Decision trace for one page.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub branch: Branch,
    pub evaluation: Option<Evaluation>,
    /// Algorithm picked by the selection rule.
    pub chosen: Algorithm,
    /// Algorithm actually stored, after the no-saving fallback.
    pub stored: Algorithm,
}

fn zstd_wins(cfg: &SelectorConfig, ev: &Evaluation) -> bool {
    let benefit = ev.benefit();
    if benefit <= 0 {
        return false;
    }
    let overhead = ev.overhead();
    // a zstd payload that is no slower to decode is accepted for any saving
    if overhead <= 0.0 {
        return true;
    }
    benefit as f64 / overhead > cfg.benefit_per_overhead_threshold
}

/// Applies the selection rule. `evaluate` runs only on the evaluation
/// branch, so this is a pure function of its inputs.
pub fn decide(
    cfg: &SelectorConfig,
    hints: SelectionHints,
    last: Algorithm,
    evaluate: impl FnOnce() -> Evaluation,
) -> Decision {
    let (branch, evaluation, chosen) = if hints.cpu_utilization > cfg.cpu_utilization_ceiling {
        (Branch::CpuCeiling, None, Algorithm::Lz4)
    } else if hints.update_fraction > cfg.update_fraction_trigger {
        let ev = evaluate();
        let alg = if zstd_wins(cfg, &ev) { Algorithm::Zstd } else { Algorithm::Lz4 };
        (Branch::Evaluated, Some(ev), alg)
    } else {
        (Branch::ReuseLast, None, last)
    };
    Decision { branch, evaluation, chosen, stored: chosen }
}

/// Compresses one page, choosing the algorithm per page.
pub fn compress_page(
    page: &[u8],
    last: Algorithm,
    hints: SelectionHints,
    cfg: &SelectorConfig,
    probe: &dyn LatencyProbe,
) -> Result<(CompressedPage, Decision), CodecError> {
    if page.len() != PAGE_SIZE {
        return Err(CodecError::BadPageSize(page.len()));
    }
    let mut candidates: Option<(Vec<u8>, Vec<u8>)> = None;
    let mut decision = decide(cfg, hints, last, || {
        let lz = lz4_compress(page);
        let zs = zstd_compress(page, ZSTD_FAST_LEVEL);
        let ev = Evaluation {
            lz4_padded: padded_len(lz.len()) as u64,
            zstd_padded: padded_len(zs.len()) as u64,
            lz4_latency_us: probe.decompress_latency_us(Algorithm::Lz4, &lz),
            zstd_latency_us: probe.decompress_latency_us(Algorithm::Zstd, &zs),
        };
        candidates = Some((lz, zs));
        ev
    });
    let payload = match (decision.chosen, candidates) {
        (Algorithm::Lz4, Some((lz, _))) => lz,
        (Algorithm::Zstd, Some((_, zs))) => zs,
        (Algorithm::Lz4, None) => lz4_compress(page),
        (Algorithm::Zstd, None) => zstd_compress(page, ZSTD_FAST_LEVEL),
        (Algorithm::None, _) => page.to_vec(),
    };
    let cp = if padded_len(payload.len()) >= PAGE_SIZE {
        CompressedPage::raw(page)
    } else {
        CompressedPage { algorithm: decision.chosen, payload }
    };
    decision.stored = cp.algorithm;
    Ok((cp, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decompress_page;
    use rand::{RngCore, SeedableRng};

    fn ev(lz4_padded: u64, zstd_padded: u64, lz4_latency_us: f64, zstd_latency_us: f64) -> Evaluation {
        Evaluation { lz4_padded, zstd_padded, lz4_latency_us, zstd_latency_us }
    }

    fn evaluated(e: Evaluation) -> Algorithm {
        let hints = SelectionHints { cpu_utilization: 0.0, update_fraction: 1.0 };
        decide(&SelectorConfig::default(), hints, Algorithm::Lz4, || e).chosen
    }

    #[test]
    fn one_block_saved_for_ten_microseconds_picks_zstd() {
        assert_eq!(evaluated(ev(8192, 4096, 5.0, 15.0)), Algorithm::Zstd);
    }

    #[test]
    fn exactly_at_threshold_stays_lz4() {
        // 4096 / (4096/300) is not strictly greater than 300
        assert_eq!(evaluated(ev(8192, 4096, 0.0, 4096.0 / 300.0 + 1e-9)), Algorithm::Lz4);
        assert_eq!(evaluated(ev(12288, 4096, 10.0, 30.0)), Algorithm::Zstd);
    }

    #[test]
    fn negative_or_zero_benefit_picks_lz4() {
        assert_eq!(evaluated(ev(4096, 8192, 5.0, 1.0)), Algorithm::Lz4);
        assert_eq!(evaluated(ev(4096, 4096, 5.0, 1.0)), Algorithm::Lz4);
    }

    #[test]
    fn cheaper_zstd_with_saving_picks_zstd() {
        assert_eq!(evaluated(ev(8192, 4096, 9.0, 9.0)), Algorithm::Zstd);
        assert_eq!(evaluated(ev(8192, 4096, 9.0, 3.0)), Algorithm::Zstd);
    }

    #[test]
    fn cpu_ceiling_forces_lz4_without_evaluation() {
        let hints = SelectionHints { cpu_utilization: 0.25, update_fraction: 1.0 };
        let d = decide(&SelectorConfig::default(), hints, Algorithm::Zstd, || panic!("must not evaluate"));
        assert_eq!((d.branch, d.chosen), (Branch::CpuCeiling, Algorithm::Lz4));
        // the ceiling itself is not "above"
        let hints = SelectionHints { cpu_utilization: 0.20, update_fraction: 0.0 };
        let d = decide(&SelectorConfig::default(), hints, Algorithm::Zstd, || panic!("must not evaluate"));
        assert_eq!((d.branch, d.chosen), (Branch::ReuseLast, Algorithm::Zstd));
    }

    #[test]
    fn update_trigger_is_strict() {
        let hints = SelectionHints { cpu_utilization: 0.0, update_fraction: 0.30 };
        let d = decide(&SelectorConfig::default(), hints, Algorithm::Lz4, || panic!("must not evaluate"));
        assert_eq!(d.branch, Branch::ReuseLast);
    }

    #[test]
    fn random_page_stored_raw() {
        let mut page = vec![0u8; PAGE_SIZE];
        rand_chacha::ChaCha8Rng::seed_from_u64(9).fill_bytes(&mut page);
        let hints = SelectionHints { cpu_utilization: 0.0, update_fraction: 1.0 };
        let (cp, d) = compress_page(&page, Algorithm::Lz4, hints, &SelectorConfig::default(), &ModelLatency::default()).unwrap();
        assert_eq!(cp.algorithm, Algorithm::None);
        assert_eq!(d.stored, Algorithm::None);
        assert_eq!(cp.block_count(), 4);
        assert_eq!(decompress_page(&cp).unwrap(), page);
    }

    #[test]
    fn redundant_page_decodes_no_slower_with_zstd() {
        // a single repeated byte: both payloads are tiny and both fit one block,
        // so the benefit is zero and lz4 is kept whatever the latencies are
        let page = vec![b'x'; PAGE_SIZE];
        let hints = SelectionHints { cpu_utilization: 0.0, update_fraction: 1.0 };
        let (cp, d) = compress_page(&page, Algorithm::Zstd, hints, &SelectorConfig::default(), &WallClockProbe).unwrap();
        let e = d.evaluation.unwrap();
        assert_eq!(e.benefit(), 0);
        assert_eq!(cp.algorithm, Algorithm::Lz4);
        assert!(e.lz4_latency_us >= 0.0 && e.zstd_latency_us >= 0.0);
    }

    #[test]
    fn model_latency_is_deterministic() {
        let page: Vec<u8> = (0..PAGE_SIZE).map(|i| (i % 251) as u8 ^ (i / 700) as u8).collect();
        let hints = SelectionHints { cpu_utilization: 0.1, update_fraction: 0.9 };
        let cfg = SelectorConfig::default();
        let a = compress_page(&page, Algorithm::Lz4, hints, &cfg, &ModelLatency::default()).unwrap();
        let b = compress_page(&page, Algorithm::Lz4, hints, &cfg, &ModelLatency::default()).unwrap();
        assert_eq!(a, b);
    }
}
