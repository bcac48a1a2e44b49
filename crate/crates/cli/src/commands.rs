//! Offline workflows behind the subcommands.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use pedsearch_core::eval::{load_manifest, run_benchmark, synth_gallery, BenchConfig, EvalResult, SynthConfig};
use pedsearch_core::fcd::TemplateGenerator;
use pedsearch_core::index::{GalleryIndex, RetrievalEngine};
use pedsearch_core::qhr::ScoredCandidate;
use pedsearch_core::session::RetrievalSession;

use crate::config::EngineConfig;
use crate::service::{AppState, ServiceState};

/// Builds an index from a manifest and writes it to `out`. Returns the item count.
pub fn ingest(cfg: &EngineConfig, manifest: &Path, out: &Path) -> Result<usize> {
    let engine = engine_from_manifest(cfg, manifest)?;
    engine.index.save(out).with_context(|| format!("writing index to {}", out.display()))?;
    Ok(engine.index.len())
}

pub fn engine_from_manifest(cfg: &EngineConfig, manifest: &Path) -> Result<RetrievalEngine> {
    let provider = cfg.provider()?;
    let m = load_manifest(manifest)?;
    let items = m.ingest_items()?;
    let index = GalleryIndex::build(&items, provider.as_ref(), &TemplateGenerator, cfg.retrieval.theta)?;
    Ok(RetrievalEngine::new(index, provider, cfg.params())?)
}

pub fn open_index(cfg: &EngineConfig, dir: &Path) -> Result<RetrievalEngine> {
    let provider = cfg.provider()?;
    let index = GalleryIndex::load(dir, provider.as_ref()).with_context(|| format!("loading index from {}", dir.display()))?;
    Ok(RetrievalEngine::new(index, provider, cfg.params())?)
}

/// The service's starting engine: the configured index if present, else empty.
pub fn service_state(cfg: &EngineConfig) -> Result<AppState> {
    let engine = match &cfg.paths.index_dir {
        Some(dir) => open_index(cfg, dir)?,
        None => RetrievalEngine::new(GalleryIndex::default(), cfg.provider()?, cfg.params())?,
    };
    let ttl = Duration::from_secs(cfg.service.session_ttl_secs);
    Ok(AppState::new(ServiceState::new(engine, ttl, cfg.paths.snapshot.clone())))
}

pub fn write_ranking(out: &mut dyn Write, ranking: &[ScoredCandidate]) -> Result<()> {
    for c in ranking {
        writeln!(out, "{}\t{}\t{:.6}", c.rank, c.image_key, c.s_final)?;
    }
    Ok(())
}

pub fn search(engine: &RetrievalEngine, query: &str, top_k: usize, out: &mut dyn Write) -> Result<usize> {
    let ranking = engine.search(query, top_k)?;
    write_ranking(out, &ranking)?;
    Ok(ranking.len())
}

/// Benchmark report as pretty JSON plus the per-round CSV curve.
pub fn bench(cfg: &EngineConfig, manifest: &Path, bench: &BenchConfig) -> Result<EvalResult> {
    let engine = engine_from_manifest(cfg, manifest)?;
    let m = load_manifest(manifest)?;
    Ok(run_benchmark(&engine, &m, bench)?)
}

/// Writes a synthetic gallery under `dir` with its manifest at `dir/manifest.jsonl`.
pub fn synth(cfg: &SynthConfig, dir: &Path) -> Result<usize> {
    let m = synth_gallery(cfg, dir)?;
    let path = dir.join("manifest.jsonl");
    m.save(&path)?;
    Ok(m.entries.len())
}

const INTERACT_HELP: &str = "first line: initial description; then one feedback line per round\n\
    :reveal KEY   confirm a correct image\n\
    :quit         close the session and print its report";

/// Terminal loop. Reads the initial description and then feedback lines from
/// `input`, printing the top `show` candidates after each round. The session
/// report is printed as JSON when the loop ends.
pub fn interact(engine: &mut RetrievalEngine, input: &mut dyn BufRead, out: &mut dyn Write, show: usize) -> Result<()> {
    writeln!(out, "{INTERACT_HELP}")?;
    let mut session: Option<RetrievalSession> = None;
    let mut line = String::new();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == ":quit" {
            break;
        }
        if let Some(key) = text.strip_prefix(":reveal") {
            let Some(s) = session.as_mut() else {
                writeln!(out, "no session yet")?;
                continue;
            };
            match s.reveal_answer(engine, key.trim()) {
                Ok(added) => writeln!(out, "revealed {} ({})", key.trim(), if added { "new" } else { "already known" })?,
                Err(e) => writeln!(out, "error: {e}")?,
            }
            continue;
        }
        let result = match session.as_mut() {
            None => RetrievalSession::start(engine, "cli", text, None).map(|s| {
                session = Some(s);
            }),
            Some(s) => s.submit_feedback(engine, text).map(|_| ()),
        };
        match (result, &session) {
            (Ok(()), Some(s)) => {
                writeln!(out, "round {}", s.round())?;
                let ranking = s.latest_ranking();
                write_ranking(out, &ranking[..show.min(ranking.len())])?;
            }
            (Err(e), _) => writeln!(out, "error: {e}")?,
            (Ok(()), None) => unreachable!("a started session is stored"),
        }
    }
    match session.as_mut() {
        Some(s) => writeln!(out, "{}", s.close(engine)?.to_json())?,
        None => bail!("no session was started"),
    }
    Ok(())
}
