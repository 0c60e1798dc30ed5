//! Data generators, the trace runner and corpus accounting.

mod corpus;
mod gen;
mod trace;

use std::path::PathBuf;

use thiserror::Error;

pub use corpus::{
    bundled_corpus_dir, corpus_report, corpus_reports, format_reports, load_corpus, record_corpus, zstd_advantage,
    CorpusReport, Pipeline, ReportConfig,
};
pub use gen::{
    device_ratio, generate_page, patch_bytes, record_page, CompressibilitySpec, Generator, RecordKind, WORDS,
};
pub use trace::{
    error_name, format_metrics, format_trace, parse_trace, run_trace, BenchSpec, Metrics, ReadResult, TraceConfig,
    TraceOp,
};

use crate::codec::CodecError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("no corpus pages found in {0}")]
    MissingCorpus(PathBuf),
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}
