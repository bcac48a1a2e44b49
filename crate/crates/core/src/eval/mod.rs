//! Ingestion manifests, retrieval and hallucination metrics, the scripted
//! user and the interactive benchmark.
//!
//! Ground-truth identity labels live only here: [`manifest::DatasetManifest`]
//! carries them, [`manifest::DatasetManifest::ingest_items`] drops them, and
//! the benchmark uses them solely to score rankings.

mod bench;
mod manifest;
mod metrics;
mod pope;
mod synth;
mod user;

use thiserror::Error;

pub use bench::{run_benchmark, BenchConfig, EvalResult, RoundMetrics, SessionTrace, RANK_KS, REVEAL_WINDOW};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, ManifestMode};
pub use metrics::{average_precision, mean_ap, rank_k};
pub use pope::{build_probes, pope_evaluate, pope_metrics, PopeMetrics, Probe};
pub use synth::{synth_gallery, SynthConfig, SYNTH_COLOURS, SYNTH_NOUNS};
pub use user::{scripted_user, UserExhausted};

use crate::index::IndexError;
use crate::session::SessionError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Session(#[from] SessionError),
}
