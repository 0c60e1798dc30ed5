//! Trace files and the trace runner.
//!
//! One op per line, `#` starts a comment:
//!
//! ```text
//! W <page> normal|none      write a generated page image
//! R <page> <lsn>|*          read at an lsn, `*` for the durable lsn
//! REDO <page> <off> <len>   append one redo record with generated bytes
//! ARCHIVE <lo> <hi>         archive the stored pages in lo..=hi
//! CRASH                     power loss, then recovery
//! EVICT                     push every cached redo record to the device
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csd::DeviceStats;
use crate::space::WriteMode;
use crate::store::{initial_hints, ChunkStore, RedoRecord, StoreError, StoreMetrics};
use crate::{Lsn, PageId, PAGE_SIZE};

use super::gen::{generate_page, patch_bytes, CompressibilitySpec, Generator};
use super::WorkloadError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Write { page: u64, mode: WriteMode },
    Read { page: u64, lsn: Option<Lsn> },
    Redo { page: u64, offset: u16, len: u16 },
    Archive { lo: u64, hi: u64 },
    Crash,
    Evict,
}

impl TraceOp {
    pub fn name(&self) -> &'static str {
        match self {
            TraceOp::Write { .. } => "W",
            TraceOp::Read { .. } => "R",
            TraceOp::Redo { .. } => "REDO",
            TraceOp::Archive { .. } => "ARCHIVE",
            TraceOp::Crash => "CRASH",
            TraceOp::Evict => "EVICT",
        }
    }
}

fn mode_name(m: WriteMode) -> &'static str {
    match m {
        WriteMode::Normal => "normal",
        WriteMode::None => "none",
        WriteMode::Heavy => "heavy",
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>, WorkloadError> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| WorkloadError::Parse { line, msg };
        let t: Vec<&str> = raw.split('#').next().unwrap().split_whitespace().collect();
        let Some(&head) = t.first() else { continue };
        let want = |n: usize| {
            if t.len() == n + 1 {
                Ok(())
            } else {
                Err(err(format!("{head} takes {n} arguments, got {}", t.len() - 1)))
            }
        };
        let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad number {s:?}")));
        let small = |s: &str| s.parse::<u16>().map_err(|_| err(format!("bad 16-bit number {s:?}")));
        let op = match head {
            "W" => {
                want(2)?;
                let mode = match t[2] {
                    "normal" => WriteMode::Normal,
                    "none" => WriteMode::None,
                    "heavy" => WriteMode::Heavy,
                    m => return Err(err(format!("unknown write mode {m:?}"))),
                };
                TraceOp::Write { page: num(t[1])?, mode }
            }
            "R" => {
                want(2)?;
                let lsn = if t[2] == "*" { None } else { Some(num(t[2])?) };
                TraceOp::Read { page: num(t[1])?, lsn }
            }
            "REDO" => {
                want(3)?;
                TraceOp::Redo { page: num(t[1])?, offset: small(t[2])?, len: small(t[3])? }
            }
            "ARCHIVE" => {
                want(2)?;
                let (lo, hi) = (num(t[1])?, num(t[2])?);
                if lo > hi {
                    return Err(err(format!("empty range {lo}..={hi}")));
                }
                TraceOp::Archive { lo, hi }
            }
            "CRASH" => {
                want(0)?;
                TraceOp::Crash
            }
            "EVICT" => {
                want(0)?;
                TraceOp::Evict
            }
            other => return Err(err(format!("unknown op {other:?}"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    let mut out = String::new();
    for op in ops {
        let _ = match *op {
            TraceOp::Write { page, mode } => writeln!(out, "W {page} {}", mode_name(mode)),
            TraceOp::Read { page, lsn: Some(l) } => writeln!(out, "R {page} {l}"),
            TraceOp::Read { page, lsn: None } => writeln!(out, "R {page} *"),
            TraceOp::Redo { page, offset, len } => writeln!(out, "REDO {page} {offset} {len}"),
            TraceOp::Archive { lo, hi } => writeln!(out, "ARCHIVE {lo} {hi}"),
            TraceOp::Crash => writeln!(out, "CRASH"),
            TraceOp::Evict => writeln!(out, "EVICT"),
        };
    }
    out
}

/// Shape of a generated trace. Weights are relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub ops: usize,
    pub pages: u64,
    pub seed: u64,
    pub generator: Generator,
    pub target_ratio: f64,
    pub write_weight: u32,
    pub read_weight: u32,
    pub redo_weight: u32,
    pub evict_weight: u32,
    /// Archive a random 64-page range every this many ops; 0 disables it.
    pub archive_every: usize,
    /// Crash every this many ops; 0 disables it.
    pub crash_every: usize,
    pub max_redo_len: u16,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            ops: 2000,
            pages: 256,
            seed: 1,
            generator: Generator::RepeatFill,
            target_ratio: 2.5,
            write_weight: 3,
            read_weight: 4,
            redo_weight: 6,
            evict_weight: 1,
            archive_every: 0,
            crash_every: 0,
            max_redo_len: 256,
        }
    }
}

impl BenchSpec {
    /// Reads a spec from `key = value` lines; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let spec: BenchSpec = toml::from_str(text).map_err(|e| WorkloadError::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn data(&self) -> CompressibilitySpec {
        CompressibilitySpec::new(self.generator, self.target_ratio, self.seed)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::BadSpec(m));
        self.data().validate().map_err(WorkloadError::BadSpec)?;
        if self.pages == 0 {
            return bad("pages must be positive".into());
        }
        if self.write_weight + self.read_weight + self.redo_weight + self.evict_weight == 0 {
            return bad("all op weights are zero".into());
        }
        if self.max_redo_len == 0 || self.max_redo_len as usize > PAGE_SIZE {
            return bad(format!("max_redo_len {} outside 1..=16384", self.max_redo_len));
        }
        Ok(())
    }

    /// Every page written once, then `ops` random ops.
    pub fn trace(&self) -> Result<Vec<TraceOp>, WorkloadError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7ace);
        let mut ops: Vec<TraceOp> = (0..self.pages).map(|page| TraceOp::Write { page, mode: WriteMode::Normal }).collect();
        let weights = [self.write_weight, self.read_weight, self.redo_weight, self.evict_weight];
        let total: u32 = weights.iter().sum();
        let mut lsn = 0u64;
        for i in 1..=self.ops {
            if self.crash_every > 0 && i % self.crash_every == 0 {
                ops.push(TraceOp::Crash);
                continue;
            }
            if self.archive_every > 0 && i % self.archive_every == 0 {
                let lo = rng.random_range(0..self.pages);
                ops.push(TraceOp::Archive { lo, hi: (lo + 63).min(self.pages - 1) });
                continue;
            }
            let page = rng.random_range(0..self.pages);
            let mut pick = rng.random_range(0..total);
            let kind = weights.iter().position(|&w| {
                if pick < w {
                    true
                } else {
                    pick -= w;
                    false
                }
            });
            ops.push(match kind.unwrap() {
                0 => TraceOp::Write { page, mode: if rng.random_bool(0.1) { WriteMode::None } else { WriteMode::Normal } },
                1 => TraceOp::Read { page, lsn: if lsn > 0 && rng.random_bool(0.2) { Some(rng.random_range(0..=lsn)) } else { None } },
                2 => {
                    let len = rng.random_range(1..=self.max_redo_len);
                    lsn += 1;
                    TraceOp::Redo { page, offset: rng.random_range(0..=(PAGE_SIZE as u16 - len)), len }
                }
                _ => TraceOp::Evict,
            });
        }
        Ok(ops)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadResult {
    pub page: u64,
    /// crc32 of the returned page, `None` if the read failed.
    pub crc: Option<u32>,
}

/// Counters from one trace run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub ops: BTreeMap<&'static str, u64>,
    pub errors: BTreeMap<&'static str, u64>,
    /// Store counters summed over every incarnation of the engine.
    pub store: StoreMetrics,
    pub device: DeviceStats,
    /// Device logical_used / physical_live at the end of the trace.
    pub ratio: f64,
    pub reads: Vec<ReadResult>,
    pub crashes: u64,
}

impl Metrics {
    pub fn error_count(&self) -> u64 {
        self.errors.values().sum()
    }

    /// One crc over every read result.
    pub fn read_digest(&self) -> u32 {
        let mut d = crate::space::wal::CRC32.digest();
        for r in &self.reads {
            d.update(&r.page.to_le_bytes());
            d.update(&r.crc.map_or([0xff; 5], |c| {
                let b = c.to_le_bytes();
                [0, b[0], b[1], b[2], b[3]]
            }));
        }
        d.finalize()
    }
}

pub fn error_name(e: &StoreError) -> &'static str {
    match e {
        StoreError::NotFound(_) => "not_found",
        StoreError::FutureLsn { .. } => "future_lsn",
        StoreError::BadRequest(_) => "bad_request",
        StoreError::OutOfLogicalSpace => "out_of_logical_space",
        StoreError::OutOfPhysicalSpace => "out_of_physical_space",
        StoreError::ReplicationLost { .. } => "replication_lost",
        StoreError::RedoLogFull => "redo_log_full",
        StoreError::Corrupt(_) => "corrupt",
        StoreError::Space(_) => "space",
        StoreError::Device(_) => "device",
        StoreError::Log(_) => "log",
    }
}

/// Where write and redo payloads come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub data: CompressibilitySpec,
}

impl TraceConfig {
    pub fn new(data: CompressibilitySpec) -> Self {
        TraceConfig { data }
    }

    /// Image of `page` for its `version`-th write.
    pub fn page_image(&self, page: u64, version: u64) -> Vec<u8> {
        let spec = CompressibilitySpec { seed: self.data.seed ^ page.wrapping_mul(0x9e37_79b9_7f4a_7c15), ..self.data };
        generate_page(&spec, version)
    }
}

/// Runs `ops` against `store`. Engine errors are counted in the metrics;
/// only a failed recovery after `CRASH` aborts the run.
pub fn run_trace(
    mut store: ChunkStore,
    ops: &[TraceOp],
    cfg: &TraceConfig,
) -> Result<(ChunkStore, Metrics), WorkloadError> {
    let mut m = Metrics {
        ops: BTreeMap::new(),
        errors: BTreeMap::new(),
        store: StoreMetrics::default(),
        device: DeviceStats::default(),
        ratio: 0.0,
        reads: Vec::new(),
        crashes: 0,
    };
    let mut versions: BTreeMap<u64, u64> = BTreeMap::new();
    let mut carried = StoreMetrics::default();
    for op in ops {
        *m.ops.entry(op.name()).or_default() += 1;
        let res: Result<(), StoreError> = match *op {
            TraceOp::Write { page, mode } => {
                let v = versions.entry(page).or_default();
                *v += 1;
                store.write_page(PageId(page), &cfg.page_image(page, *v), mode, initial_hints()).map(drop)
            }
            TraceOp::Read { page, lsn } => {
                let at = lsn.unwrap_or(store.lsn_state().durable);
                let r = store.read_page(PageId(page), at);
                m.reads.push(ReadResult { page, crc: r.as_ref().ok().map(|d| crate::space::wal::CRC32.checksum(d)) });
                r.map(drop)
            }
            TraceOp::Redo { page, offset, len } => {
                let lsn = store.lsn_state().durable + 1;
                let rec = RedoRecord::patch(lsn, PageId(page), offset, patch_bytes(cfg.data.seed, lsn, len as usize));
                store.write_redo(&[rec]).map(drop)
            }
            TraceOp::Archive { lo, hi } => {
                let pages: Vec<PageId> =
                    (lo..=hi).map(PageId).filter(|&p| store.index_entry(p).is_some()).collect();
                if pages.is_empty() {
                    Ok(())
                } else {
                    store.archive_range(&pages).map(drop)
                }
            }
            TraceOp::Evict => store.evict_all(),
            TraceOp::Crash => {
                carried.absorb(store.metrics());
                let scfg = store.config().clone();
                store = ChunkStore::recover(store.crash(0, 0), scfg)?;
                m.crashes += 1;
                Ok(())
            }
        };
        if let Err(e) = res {
            *m.errors.entry(error_name(&e)).or_default() += 1;
        }
    }
    carried.absorb(store.metrics());
    m.store = carried;
    m.device = store.device().device_stats();
    m.ratio = if m.device.physical_live == 0 { 0.0 } else { m.device.logical_used as f64 / m.device.physical_live as f64 };
    Ok((store, m))
}

/// Aligned table followed by `#DATA` lines.
pub fn format_metrics(m: &Metrics) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    for (k, v) in &m.ops {
        rows.push((format!("ops.{k}"), v.to_string()));
    }
    for (k, v) in &m.errors {
        rows.push((format!("errors.{k}"), v.to_string()));
    }
    for (k, v) in m.store.fields() {
        rows.push((format!("store.{k}"), v.to_string()));
    }
    for (k, v) in &m.store.log_reads_per_consolidation {
        rows.push((format!("log_reads_hist.{k}"), v.to_string()));
    }
    let d = &m.device;
    for (k, v) in [
        ("logical_used", d.logical_used),
        ("physical_used", d.physical_used),
        ("physical_live", d.physical_live),
        ("gc_bytes_moved", d.gc_bytes_moved),
        ("reads", d.reads),
        ("writes", d.writes),
        ("trims", d.trims),
    ] {
        rows.push((format!("device.{k}"), v.to_string()));
    }
    rows.push(("crashes".into(), m.crashes.to_string()));
    rows.push(("compression_ratio".into(), format!("{:.4}", m.ratio)));
    rows.push(("read_digest".into(), format!("{:08x}", m.read_digest())));

    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in &rows {
        let _ = writeln!(out, "{k:<width$}  {v:>14}");
    }
    for (k, v) in &rows {
        let _ = writeln!(out, "#DATA metric name={k} value={v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csd::{Csd, DeviceConfig};
    use crate::store::StoreConfig;

    fn store() -> ChunkStore {
        ChunkStore::new(Csd::new(DeviceConfig::default()).unwrap(), StoreConfig::default()).unwrap()
    }

    fn cfg() -> TraceConfig {
        TraceConfig::new(CompressibilitySpec::new(Generator::TextMix, 1.0, 7))
    }

    #[test]
    fn parse_roundtrip() {
        let text = "W 1 normal\nW 2 none # raw\n\nR 1 *\nR 2 5\nREDO 1 100 20\nARCHIVE 0 63\nEVICT\nCRASH\n";
        let ops = parse_trace(text).unwrap();
        assert_eq!(ops.len(), 8);
        assert_eq!(parse_trace(&format_trace(&ops)).unwrap(), ops);
        for (bad, line) in [("W 1", 1), ("X\n", 1), ("W 1 normal\nR x *", 2), ("ARCHIVE 5 4", 1), ("REDO 1 0 70000", 1)] {
            assert!(matches!(parse_trace(bad), Err(WorkloadError::Parse { line: l, .. }) if l == line), "{bad}");
        }
    }

    #[test]
    fn bench_spec_parse() {
        let s = BenchSpec::parse("ops = 10\ngenerator = \"text_mix\"\ntarget_ratio = 1.0\n").unwrap();
        assert_eq!((s.ops, s.generator), (10, Generator::TextMix));
        assert!(matches!(BenchSpec::parse("opz = 1"), Err(WorkloadError::Parse { .. })));
        assert!(matches!(BenchSpec::parse("generator = \"random\"\ntarget_ratio = 3.0"), Err(WorkloadError::BadSpec(_))));
    }

    #[test]
    fn write_only_trace_hits_the_device() {
        let n = 20;
        let ops: Vec<TraceOp> = (0..n).map(|page| TraceOp::Write { page, mode: WriteMode::Normal }).collect();
        let (_, m) = run_trace(store(), &ops, &cfg()).unwrap();
        assert!(m.device.writes >= n);
        assert_eq!(m.error_count(), 0);
    }

    #[test]
    fn read_after_write_finds_everything() {
        let mut ops = Vec::new();
        for page in 0..10 {
            ops.push(TraceOp::Write { page, mode: WriteMode::Normal });
            ops.push(TraceOp::Redo { page, offset: 8, len: 32 });
            ops.push(TraceOp::Read { page, lsn: None });
        }
        let (_, m) = run_trace(store(), &ops, &cfg()).unwrap();
        assert_eq!(m.errors.get("not_found"), None);
        assert!(m.reads.iter().all(|r| r.crc.is_some()));
    }

    #[test]
    fn errors_are_counted_not_raised() {
        let ops = parse_trace("R 9 *\nW 1 heavy\nR 1 99\n").unwrap();
        let (_, m) = run_trace(store(), &ops, &cfg()).unwrap();
        assert_eq!(m.errors.get("not_found"), Some(&1));
        assert_eq!(m.errors.get("future_lsn"), Some(&1));
        assert_eq!(m.errors.get("bad_request"), Some(&1));
    }

    #[test]
    fn ratio_matches_device() {
        let spec = BenchSpec { ops: 200, pages: 32, ..BenchSpec::default() };
        let (s, m) = run_trace(store(), &spec.trace().unwrap(), &TraceConfig::new(spec.data())).unwrap();
        let d = s.device().device_stats();
        assert_eq!(m.ratio, d.logical_used as f64 / d.physical_live as f64);
        assert!(m.ratio > 1.5, "{}", m.ratio);
    }

    #[test]
    fn crash_replay_reads_the_same() {
        let spec = BenchSpec { ops: 300, pages: 40, archive_every: 97, ..BenchSpec::default() };
        let plain = spec.trace().unwrap();
        let with_crash = BenchSpec { crash_every: 50, ..spec.clone() };
        let crashed = with_crash.trace().unwrap();
        assert!(crashed.contains(&TraceOp::Crash));
        let strip = |ops: &[TraceOp]| ops.iter().copied().filter(|o| *o != TraceOp::Crash).collect::<Vec<_>>();
        let tc = TraceConfig::new(spec.data());
        let (_, a) = run_trace(store(), &strip(&crashed), &tc).unwrap();
        let (_, b) = run_trace(store(), &crashed, &tc).unwrap();
        assert!(b.crashes > 0);
        assert_eq!(a.reads, b.reads);
        assert_eq!(a.read_digest(), b.read_digest());
        assert_eq!(a.error_count(), 0);
        let (_, c) = run_trace(store(), &plain, &tc).unwrap();
        assert_eq!(format_metrics(&c), format_metrics(&run_trace(store(), &plain, &tc).unwrap().1));
    }
}
