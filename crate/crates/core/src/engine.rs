//! An on-disk engine directory and the operations the command line drives.
//!
//! Layout of an engine directory:
//!
//! ```text
//! config.toml     EngineConfig
//! device.img      device image
//! checkpoint.bin  space index checkpoint
//! wal.log         space index WAL (path configurable)
//! redo.log        redo log
//! ```
//!
//! Everything is loaded into memory on open and written back by
//! [`Engine::save`]. Replicas are simulated in memory and start empty on
//! every open.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{HeavyConfig, SelectorConfig};
use crate::csd::{Csd, CsdError, DeviceConfig, EntryFormat};
use crate::fastlog::{LogDevice, LogError};
use crate::scheduler::{
    format_node, format_step, simulate, classify_zone, in_band, PopulationSpec, SchedError, SchedulerConfig,
};
use crate::space::{SpaceError, SpaceIndex};
use crate::store::{ArchiveReport, ChunkStore, CompressionPolicy, ReplicaSet, StoreConfig, StoreError};
use crate::workload::{format_metrics, run_trace, BenchSpec, CompressibilitySpec, Generator, Metrics, TraceConfig, TraceOp, WorkloadError};
use crate::PageId;

const CONFIG_FILE: &str = "config.toml";
const DEVICE_FILE: &str = "device.img";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const REDO_FILE: &str = "redo.log";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0} is already initialized")]
    AlreadyInitialized(PathBuf),
    #[error("{0} is not an engine directory")]
    NotInitialized(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Device(#[from] CsdError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EngineError {
    /// Process exit code: 2 config, 3 space exhausted, 4 replication lost,
    /// 5 corruption, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) => 2,
            EngineError::Store(e) => store_code(e),
            EngineError::Workload(WorkloadError::Store(e)) => store_code(e),
            EngineError::Workload(WorkloadError::BadSpec(_) | WorkloadError::Parse { .. }) => 2,
            EngineError::Workload(WorkloadError::Codec(_)) => 5,
            EngineError::Sched(SchedError::InvalidConfig(_) | SchedError::Parse { .. }) => 2,
            EngineError::Sched(SchedError::ClusterFull) => 3,
            EngineError::Device(e) => device_code(e),
            EngineError::Space(SpaceError::OutOfLogicalSpace) => 3,
            EngineError::Space(SpaceError::CorruptWal(_) | SpaceError::CorruptCheckpoint(_)) => 5,
            EngineError::Log(LogError::Corrupt(_)) => 5,
            _ => 1,
        }
    }
}

fn device_code(e: &CsdError) -> i32 {
    match e {
        CsdError::OutOfPhysicalSpace => 3,
        CsdError::Corrupt(_) => 5,
        CsdError::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::OutOfLogicalSpace | StoreError::OutOfPhysicalSpace | StoreError::RedoLogFull => 3,
        StoreError::ReplicationLost { .. } => 4,
        StoreError::Corrupt(_) => 5,
        StoreError::Device(e) => device_code(e),
        StoreError::Space(SpaceError::CorruptWal(_) | SpaceError::CorruptCheckpoint(_)) => 5,
        StoreError::Log(LogError::Corrupt(_)) => 5,
        _ => 1,
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Contents of `config.toml`. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// WAL file, relative to the engine directory unless absolute.
    pub wal_path: PathBuf,
    /// Capacity of each fast log (WAL and redo log).
    pub fast_log_capacity: u64,
    /// Must be odd.
    pub replicas: usize,
    pub log_cache_budget: usize,
    pub policy: CompressionPolicy,
    pub per_page_log: bool,
    /// Seeds generated data and the replica fault schedule.
    pub seed: u64,
    pub device: DeviceConfig,
    pub selector: SelectorConfig,
    pub heavy: HeavyConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let store = StoreConfig::default();
        EngineConfig {
            wal_path: PathBuf::from("wal.log"),
            fast_log_capacity: store.redo_log_capacity,
            replicas: store.replicas,
            log_cache_budget: store.log_cache_budget,
            policy: store.policy,
            per_page_log: store.per_page_log,
            seed: 0,
            device: DeviceConfig::default(),
            selector: store.selector,
            heavy: store.heavy,
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        self.store_config().validate().map_err(EngineError::Config)?;
        if self.fast_log_capacity < 4096 {
            return Err(EngineError::Config(format!("fast_log_capacity {} below 4096", self.fast_log_capacity)));
        }
        Ok(())
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            policy: self.policy,
            selector: self.selector.clone(),
            heavy: self.heavy.clone(),
            log_cache_budget: self.log_cache_budget,
            replicas: self.replicas,
            replica_seed: self.seed,
            per_page_log: self.per_page_log,
            redo_log_capacity: self.fast_log_capacity,
            wal_capacity: self.fast_log_capacity,
            ..StoreConfig::default()
        }
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(f) = ov.format {
            self.device.entry_format = f;
        }
        if let Some(p) = ov.policy {
            self.policy = p;
        }
    }
}

/// Command-line settings layered over the stored config.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub format: Option<EntryFormat>,
    pub policy: Option<CompressionPolicy>,
}

pub struct Engine {
    dir: PathBuf,
    cfg: EngineConfig,
    store: Option<ChunkStore>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("dir", &self.dir).field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Engine {
    fn wal_path(dir: &Path, cfg: &EngineConfig) -> PathBuf {
        dir.join(&cfg.wal_path)
    }

    /// Creates a fresh engine in `dir`, which must be missing or empty.
    pub fn init(dir: &Path, cfg: EngineConfig) -> Result<Engine> {
        cfg.validate()?;
        if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
            return Err(EngineError::AlreadyInitialized(dir.to_path_buf()));
        }
        std::fs::create_dir_all(dir)?;
        let scfg = cfg.store_config();
        let store = ChunkStore::new(Csd::new(cfg.device.clone())?, scfg)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
        let mut e = Engine { dir: dir.to_path_buf(), cfg, store: Some(store) };
        e.save()?;
        Ok(e)
    }

    /// Opens an engine directory. Overrides that would change the device
    /// layout of an existing engine are rejected.
    pub fn open(dir: &Path, ov: &Overrides) -> Result<Engine> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(EngineError::NotInitialized(dir.to_path_buf()));
        }
        let mut cfg = EngineConfig::parse(&std::fs::read_to_string(&cfg_path)?)?;
        if let Some(f) = ov.format {
            if f != cfg.device.entry_format {
                return Err(EngineError::Config(format!(
                    "engine uses {:?} entries; the format is fixed at init",
                    cfg.device.entry_format
                )));
            }
        }
        cfg.apply(ov);
        let dev = Csd::load_image(&dir.join(DEVICE_FILE))?;
        let wal = LogDevice::load(&Self::wal_path(dir, &cfg), cfg.fast_log_capacity)?;
        let checkpoint = std::fs::read(dir.join(CHECKPOINT_FILE))?;
        let space = SpaceIndex::recover(&checkpoint, wal)?;
        let redo = LogDevice::load(&dir.join(REDO_FILE), cfg.fast_log_capacity)?;
        let scfg = cfg.store_config();
        let replicas = ReplicaSet::new(scfg.replicas, scfg.replica_seed);
        let store = ChunkStore::from_parts(dev, space, redo, replicas, scfg)?;
        Ok(Engine { dir: dir.to_path_buf(), cfg, store: Some(store) })
    }

    /// Checkpoints and writes every file back.
    pub fn save(&mut self) -> Result<()> {
        let store = self.store_mut();
        store.checkpoint()?;
        store.sync()?;
        let (dir, cfg, store) = (&self.dir, &self.cfg, self.store.as_ref().unwrap());
        store.device().save_image(&dir.join(DEVICE_FILE))?;
        let tmp = dir.join(CHECKPOINT_FILE).with_extension("tmp");
        std::fs::write(&tmp, store.space().checkpoint_bytes())?;
        std::fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
        store.space().wal().save(&Self::wal_path(dir, cfg))?;
        store.redo_log().save(&dir.join(REDO_FILE))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ChunkStore {
        self.store.as_ref().expect("store present")
    }

    pub fn store_mut(&mut self) -> &mut ChunkStore {
        self.store.as_mut().expect("store present")
    }

    /// Data used by trace writes: text pages under the engine seed.
    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig::new(CompressibilitySpec::new(Generator::TextMix, 1.0, self.cfg.seed))
    }

    pub fn run(&mut self, ops: &[TraceOp], tc: &TraceConfig) -> Result<Metrics> {
        let store = self.store.take().expect("store present");
        let (store, m) = run_trace(store, ops, tc)?;
        self.store = Some(store);
        Ok(m)
    }

    pub fn bench(&mut self, spec: &BenchSpec) -> Result<Metrics> {
        let ops = spec.trace()?;
        self.run(&ops, &TraceConfig::new(spec.data()))
    }

    /// Archives the stored pages in `lo..=hi`.
    pub fn archive(&mut self, lo: u64, hi: u64) -> Result<ArchiveReport> {
        if lo > hi {
            return Err(EngineError::Config(format!("empty range {lo}..={hi}")));
        }
        let store = self.store_mut();
        let pages: Vec<PageId> = (lo..=hi).map(PageId).filter(|&p| store.index_entry(p).is_some()).collect();
        if pages.is_empty() {
            return Ok(ArchiveReport::default());
        }
        Ok(store.archive_range(&pages)?)
    }

    pub fn stats(&self) -> EngineStats {
        let s = self.store();
        let d = s.device().device_stats();
        EngineStats {
            pages: s.pages().len() as u64,
            durable_lsn: s.lsn_state().durable,
            apply_lsn: s.lsn_state().apply,
            allocated_blocks: s.space().state().alloc.allocated_blocks(),
            logical_used: d.logical_used,
            physical_used: d.physical_used,
            physical_live: d.physical_live,
            gc_bytes_moved: d.gc_bytes_moved,
            device_reads: d.reads,
            device_writes: d.writes,
            device_trims: d.trims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineStats {
    pub pages: u64,
    pub durable_lsn: u64,
    pub apply_lsn: u64,
    pub allocated_blocks: u64,
    pub logical_used: u64,
    pub physical_used: u64,
    pub physical_live: u64,
    pub gc_bytes_moved: u64,
    pub device_reads: u64,
    pub device_writes: u64,
    pub device_trims: u64,
}

impl EngineStats {
    pub fn fields(&self) -> [(&'static str, u64); 11] {
        [
            ("pages", self.pages),
            ("durable_lsn", self.durable_lsn),
            ("apply_lsn", self.apply_lsn),
            ("allocated_blocks", self.allocated_blocks),
            ("logical_used", self.logical_used),
            ("physical_used", self.physical_used),
            ("physical_live", self.physical_live),
            ("gc_bytes_moved", self.gc_bytes_moved),
            ("device_reads", self.device_reads),
            ("device_writes", self.device_writes),
            ("device_trims", self.device_trims),
        ]
    }

    pub fn ratio(&self) -> f64 {
        if self.physical_live == 0 {
            0.0
        } else {
            self.logical_used as f64 / self.physical_live as f64
        }
    }
}

fn table(rows: &[(String, String)], tag: &str) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v:>14}");
    }
    for (k, v) in rows {
        let _ = writeln!(out, "#DATA {tag} name={k} value={v}");
    }
    out
}

pub fn format_stats(s: &EngineStats) -> String {
    let mut rows: Vec<(String, String)> = s.fields().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    rows.push(("compression_ratio".into(), format!("{:.4}", s.ratio())));
    table(&rows, "stats")
}

pub fn format_archive(r: &ArchiveReport) -> String {
    let rows: Vec<(String, String)> = [
        ("segments", r.segments as u64),
        ("pages_archived", r.pages_archived as u64),
        ("pages_skipped", r.pages_skipped as u64),
        ("blocks_before", r.blocks_before),
        ("blocks_after", r.blocks_after),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    table(&rows, "archive")
}

pub fn format_run(m: &Metrics) -> String {
    format_metrics(m)
}

/// Runs the scheduler on a population. Without a config the ratio range is
/// the cluster average +/- 10%.
pub fn sched_report(spec: &PopulationSpec, cfg: Option<SchedulerConfig>, steps: usize) -> Result<String> {
    let cfg = match cfg {
        Some(c) => c,
        None => SchedulerConfig::around(spec.build()?.c_avg(), 0.1),
    };
    let sim = simulate(spec, &cfg, steps)?;
    let mut out = format!(
        "config c_l={:.4} c_h={:.4} delta={:.4} block_threshold={:.4} migrate_trigger={:.4}\n",
        cfg.c_l, cfg.c_h, cfg.delta, cfg.block_threshold, cfg.migrate_trigger
    );
    let (c_avg, w_avg) = (sim.cluster.c_avg(), sim.cluster.w_avg());
    for n in &sim.cluster.nodes {
        let zone = in_band(n, &cfg, w_avg).then(|| classify_zone(n, &cfg, c_avg));
        out += &format_node(n, zone);
        out.push('\n');
    }
    for r in &sim.reports {
        let _ = writeln!(out, "#DATA {}", format_step(r));
    }
    let last = sim.reports.last().expect("step 0 always reported");
    let _ = writeln!(out, "#DATA in_range_fraction={:.4} nodes={} steps={steps}", last.in_range, sim.cluster.nodes.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::parse_trace;

    fn small() -> EngineConfig {
        EngineConfig { device: DeviceConfig::with_logical_capacity(16 << 20), ..EngineConfig::default() }
    }

    #[test]
    fn init_then_stats_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let e = Engine::init(dir.path(), small()).unwrap();
        let s = e.stats();
        assert_eq!((s.pages, s.logical_used, s.physical_live, s.durable_lsn), (0, 0, 0, 0));
        assert!(matches!(Engine::init(dir.path(), small()), Err(EngineError::AlreadyInitialized(_))));
        let e = Engine::open(dir.path(), &Overrides::default()).unwrap();
        assert_eq!(e.stats(), s);
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::init(dir.path(), small()).unwrap();
        let ops = parse_trace("W 1 normal\nW 2 none\nREDO 1 10 40\nR 1 *\nR 2 *\n").unwrap();
        let tc = e.trace_config();
        let m1 = e.run(&ops, &tc).unwrap();
        e.save().unwrap();
        let before = e.stats();
        let mut e = Engine::open(dir.path(), &Overrides::default()).unwrap();
        assert_eq!(e.stats().pages, before.pages);
        assert_eq!(e.stats().physical_live, before.physical_live);
        assert_eq!(e.stats().durable_lsn, 1);
        let reads = parse_trace("R 1 *\nR 2 *\n").unwrap();
        let m2 = e.run(&reads, &tc).unwrap();
        assert_eq!(m1.reads, m2.reads);
    }

    #[test]
    fn formats_differ_only_in_mapping_region() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut c1 = small();
        c1.device.entry_format = EntryFormat::V1;
        let c2 = small();
        Engine::init(a.path(), c1).unwrap();
        Engine::init(b.path(), c2).unwrap();
        let i1 = std::fs::read(a.path().join(DEVICE_FILE)).unwrap();
        let i2 = std::fs::read(b.path().join(DEVICE_FILE)).unwrap();
        let (r1, r2) = (Csd::image_l2p_region(&i1), Csd::image_l2p_region(&i2));
        assert_ne!(i1, i2);
        assert_eq!(r1.start, r2.start);
        assert_eq!(i1[..r1.start], i2[..r2.start]);
        assert_eq!(i1[r1.end..], i2[r2.end..]);
    }

    #[test]
    fn config_rejects_unknown_keys_and_even_replicas() {
        assert!(matches!(EngineConfig::parse("bogus = 1\n"), Err(EngineError::Config(_))));
        assert!(matches!(EngineConfig::parse("replicas = 2\n"), Err(EngineError::Config(_))));
        let c = EngineConfig::parse("replicas = 5\n[device]\nentry_format = \"v1\"\n").unwrap();
        assert_eq!((c.replicas, c.device.entry_format), (5, EntryFormat::V1));
        assert_eq!(EngineConfig::parse(&small().to_toml()).unwrap(), small());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(EngineError::Config("x".into()).exit_code(), 2);
        assert_eq!(EngineError::Store(StoreError::OutOfPhysicalSpace).exit_code(), 3);
        assert_eq!(EngineError::Store(StoreError::ReplicationLost { acks: 1, needed: 2 }).exit_code(), 4);
        assert_eq!(EngineError::Store(StoreError::Corrupt("x".into())).exit_code(), 5);
        assert_eq!(EngineError::NotInitialized(PathBuf::new()).exit_code(), 1);
    }

    #[test]
    fn format_is_fixed_at_init() {
        let dir = tempfile::tempdir().unwrap();
        Engine::init(dir.path(), small()).unwrap();
        let ov = Overrides { format: Some(EntryFormat::V1), ..Overrides::default() };
        assert!(matches!(Engine::open(dir.path(), &ov), Err(EngineError::Config(_))));
    }

    #[test]
    fn sched_reports_in_range_line() {
        let spec = PopulationSpec { nodes: 20, ..PopulationSpec::default() };
        let out = sched_report(&spec, None, 2).unwrap();
        assert!(out.lines().any(|l| l.starts_with("#DATA in_range_fraction=")));
        assert_eq!(out, sched_report(&spec, None, 2).unwrap());
    }
}
