use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualstore::csd::EntryFormat;
use dualstore::engine::{
    format_archive, format_run, format_stats, sched_report, Engine, EngineConfig, EngineError, Overrides,
};
use dualstore::scheduler::{parse_population, parse_sched_config, PopulationSpec};
use dualstore::store::CompressionPolicy;
use dualstore::workload::{parse_trace, BenchSpec};

#[derive(Parser)]
#[command(name = "dualstore", version, about = "Dual-layer compressed page store")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Seed for generated data and fault schedules.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// L2P entry format (init only).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Store pages uncompressed and let the device compress alone.
    #[arg(long, global = true, conflicts_with_all = ["adaptive", "lz4", "zstd"])]
    no_software_compression: bool,
    #[arg(long, global = true, conflicts_with_all = ["lz4", "zstd"])]
    adaptive: bool,
    #[arg(long, global = true, conflicts_with = "zstd")]
    lz4: bool,
    #[arg(long, global = true)]
    zstd: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    V1,
    V2,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create an engine directory.
    Init {
        dir: PathBuf,
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replay a trace file.
    Run { dir: PathBuf, trace: PathBuf },
    /// Generate and replay a trace from a bench spec.
    Bench { dir: PathBuf, spec: Option<PathBuf> },
    /// Simulate the compression-aware scheduler (needs no engine).
    Sched {
        /// Population spec; the bundled 100-node population when omitted.
        #[arg(long)]
        population: Option<PathBuf>,
        /// Scheduler config; the cluster average +/- 10% when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Print engine statistics.
    Stats { dir: PathBuf },
    /// Archive the stored pages in lo..=hi.
    Archive { dir: PathBuf, lo: u64, hi: u64 },
}

const BUNDLED_POPULATION: &str = include_str!("../../data/population.toml");

fn read(path: &Path) -> Result<String, EngineError> {
    std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
}

fn overrides(g: &Global) -> Overrides {
    let policy = if g.no_software_compression {
        Some(CompressionPolicy::Off)
    } else if g.adaptive {
        Some(CompressionPolicy::Adaptive)
    } else if g.lz4 {
        Some(CompressionPolicy::Lz4)
    } else if g.zstd {
        Some(CompressionPolicy::Zstd)
    } else {
        None
    };
    let format = g.format.map(|f| match f {
        Format::V1 => EntryFormat::V1,
        Format::V2 => EntryFormat::V2,
    });
    Overrides { seed: g.seed, format, policy }
}

fn run(cli: Cli) -> Result<String, EngineError> {
    let ov = overrides(&cli.global);
    match cli.cmd {
        Cmd::Init { dir, config } => {
            let mut cfg = match config {
                Some(p) => EngineConfig::parse(&read(&p)?)?,
                None => EngineConfig::default(),
            };
            cfg.apply(&ov);
            let e = Engine::init(&dir, cfg)?;
            Ok(format_stats(&e.stats()))
        }
        Cmd::Run { dir, trace } => {
            let ops = parse_trace(&read(&trace)?)?;
            let mut e = Engine::open(&dir, &ov)?;
            let tc = e.trace_config();
            let m = e.run(&ops, &tc)?;
            e.save()?;
            Ok(format_run(&m))
        }
        Cmd::Bench { dir, spec } => {
            let mut spec = match spec {
                Some(p) => BenchSpec::parse(&read(&p)?)?,
                None => BenchSpec::default(),
            };
            if let Some(s) = ov.seed {
                spec.seed = s;
            }
            let mut e = Engine::open(&dir, &ov)?;
            let m = e.bench(&spec)?;
            e.save()?;
            Ok(format_run(&m))
        }
        Cmd::Sched { population, config, steps } => {
            let mut spec: PopulationSpec = match population {
                Some(p) => parse_population(&read(&p)?)?,
                None => parse_population(BUNDLED_POPULATION)?,
            };
            if let Some(s) = ov.seed {
                spec.seed = s;
            }
            let cfg = config.map(|p| read(&p).and_then(|t| Ok(parse_sched_config(&t)?))).transpose()?;
            sched_report(&spec, cfg, steps)
        }
        Cmd::Stats { dir } => Ok(format_stats(&Engine::open(&dir, &ov)?.stats())),
        Cmd::Archive { dir, lo, hi } => {
            let mut e = Engine::open(&dir, &ov)?;
            let r = e.archive(lo, hi)?;
            e.save()?;
            Ok(format_archive(&r))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
