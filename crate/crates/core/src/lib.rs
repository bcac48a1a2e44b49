//! Interactive zero-shot text-based person retrieval.
//!
//! - [`encoders`]: embedding providers and the cosine kernel
//! - [`fcd`]: restoration contracts, prompt assembly, contrastive decoding and
//!   structured descriptions
//! - [`graph`]: the incremental multi-relational semantic graph
//! - [`qhr`]: fused scoring, top-N selection, per-slot matching and re-ranking
//! - [`index`]: the searchable gallery built from a manifest
//! - [`session`]: the multi-turn refinement loop
//! - [`eval`]: manifests, metrics, the scripted user and the benchmark

pub mod encoders;
pub mod fcd;
pub mod graph;
pub mod qhr;
pub mod index;
pub mod session;
pub mod eval;
