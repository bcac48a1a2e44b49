//! Interactive benchmark.
//!
//! One session per query identity, started from one of its captions. Each
//! later round the scripted user names one more true attribute; after every
//! ranking at most one correct image from the top [`REVEAL_WINDOW`] is
//! revealed to the session. Metrics are computed on the full, unmasked
//! ranking of every round.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_ap, rank_k};
use super::{scripted_user, DatasetManifest, EvalError};
use crate::encoders::fnv1a64;
use crate::fcd::{canonical_phrase, parse_query_text, Slot, SlotAttributes};
use crate::index::RetrievalEngine;
use crate::session::RetrievalSession;

pub const RANK_KS: [usize; 3] = [1, 5, 10];
/// Reveals only consider the top of the ranking, as a user scanning results would.
pub const REVEAL_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub rounds: usize,
    pub seed: u64,
    /// Seeded subset of query identities; `None` queries all of them.
    pub max_queries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub rank_k: BTreeMap<usize, f64>,
    pub map_score: f64,
    /// Mean over sessions of the target's rank.
    pub mean_target_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub identity_label: String,
    pub query: String,
    /// Rank of the target person per round: its best-ranked image.
    pub target_rank: Vec<usize>,
    /// Mean rank of all the target's images, per round. Views hiding a named
    /// attribute can slip even while the person rises.
    pub mean_image_rank: Vec<f64>,
    /// Feedback given in each round (none in round 0 or once exhausted).
    pub feedback: Vec<Option<String>>,
    /// Image revealed after each round's ranking.
    pub reveals: Vec<Option<String>>,
    #[serde(skip)]
    relevance: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Final-round Rank-K.
    pub rank_k: BTreeMap<usize, f64>,
    /// Final-round mAP.
    pub map_score: f64,
    pub per_round: Vec<RoundMetrics>,
    pub sessions: Vec<SessionTrace>,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Per-round curve as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,rank1,rank5,rank10,map,mean_target_rank\n");
        for r in &self.per_round {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.round, r.rank_k[&1], r.rank_k[&5], r.rank_k[&10], r.map_score, r.mean_target_rank
            );
        }
        out
    }
}

struct QueryPlan<'a> {
    label: &'a str,
    q0: &'a str,
    truth: SlotAttributes,
    targets: BTreeSet<String>,
}

fn query_plans(manifest: &DatasetManifest) -> Vec<QueryPlan<'_>> {
    let mut by_label: BTreeMap<&str, QueryPlan> = BTreeMap::new();
    for e in &manifest.entries {
        let plan = by_label.entry(&e.identity_label).or_insert_with(|| QueryPlan {
            label: &e.identity_label,
            q0: "",
            truth: SlotAttributes::new(),
            targets: BTreeSet::new(),
        });
        plan.targets.insert(e.image_key(manifest.mode));
        if plan.q0.is_empty() {
            if let Some(d) = e.descriptions.iter().find(|d| parse_query_text(d).is_ok()) {
                plan.q0 = d;
            }
        }
        for (slot, phrases) in &e.attributes {
            let known = plan.truth.entry(*slot).or_default();
            for p in phrases {
                if !known.contains(p) {
                    known.push(p.clone());
                }
            }
        }
    }
    by_label.into_values().filter(|s| !s.q0.is_empty()).collect()
}

fn run_one(engine: &RetrievalEngine, plan: &QueryPlan<'_>, cfg: &BenchConfig) -> Result<SessionTrace, EvalError> {
    let mut eng = engine.clone();
    let mut session = RetrievalSession::start(&mut eng, &format!("bench-{}", plan.label), plan.q0, None)?;
    let truth_set: BTreeSet<(Slot, String)> = plan
        .truth
        .iter()
        .flat_map(|(s, v)| v.iter().map(move |p| (*s, canonical_phrase(p))))
        .collect();
    let mut told: BTreeSet<(Slot, String)> = parse_query_text(plan.q0)
        .map(|d| d.phrases().map(|(s, p)| (s, canonical_phrase(p))).collect::<BTreeSet<_>>())
        .unwrap_or_default()
        .intersection(&truth_set)
        .cloned()
        .collect();
    let user_seed = cfg.seed ^ fnv1a64(plan.label.as_bytes());
    let mut trace = SessionTrace {
        identity_label: plan.label.to_owned(),
        query: plan.q0.to_owned(),
        target_rank: Vec::new(),
        mean_image_rank: Vec::new(),
        feedback: Vec::new(),
        reveals: Vec::new(),
        relevance: Vec::new(),
    };
    for r in 0..=cfg.rounds {
        let mut given = None;
        if r > 0 {
            if let Ok(text) = scripted_user(&plan.truth, &mut told, user_seed) {
                session.submit_feedback(&mut eng, &text)?;
                given = Some(text);
            }
        }
        trace.feedback.push(given);
        let ranking = session.latest_ranking();
        let relevance: Vec<bool> = ranking.iter().map(|c| plan.targets.contains(&c.image_key)).collect();
        let ranks: Vec<usize> = ranking.iter().filter(|c| plan.targets.contains(&c.image_key)).map(|c| c.rank).collect();
        if ranks.is_empty() {
            return Err(EvalError::Validation(format!("no image of {} is in the index", plan.label)));
        }
        trace.target_rank.push(ranks[0]);
        trace.mean_image_rank.push(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64);
        trace.relevance.push(relevance);

        // at most one confirmed answer per round
        let reveal = ranking
            .iter()
            .take(REVEAL_WINDOW)
            .find(|c| plan.targets.contains(&c.image_key) && !session.revealed().contains(&c.image_key))
            .map(|c| c.image_key.clone());
        if let Some(key) = &reveal {
            session.reveal_answer(&eng, key)?;
        }
        trace.reveals.push(reveal);
    }
    session.close(&mut eng)?;
    Ok(trace)
}

/// Runs one interactive session per query identity (in parallel) and
/// reduces per-round metrics.
pub fn run_benchmark(engine: &RetrievalEngine, manifest: &DatasetManifest, cfg: &BenchConfig) -> Result<EvalResult, EvalError> {
    let mut plans = query_plans(manifest);
    if let Some(n) = cfg.max_queries {
        plans.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        plans.truncate(n);
        plans.sort_by(|a, b| a.label.cmp(b.label));
    }
    if plans.is_empty() {
        return Err(EvalError::Validation("no query identity has a usable description".into()));
    }
    let sessions = plans
        .par_iter()
        .map(|s| run_one(engine, s, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_round = Vec::with_capacity(cfg.rounds + 1);
    for r in 0..=cfg.rounds {
        let firsts: Vec<usize> = sessions.iter().map(|s| s.target_rank[r]).collect();
        let rel: Vec<Vec<bool>> = sessions.iter().map(|s| s.relevance[r].clone()).collect();
        let mut rk = BTreeMap::new();
        for k in RANK_KS {
            rk.insert(k, rank_k(&firsts, k)?);
        }
        per_round.push(RoundMetrics {
            round: r,
            rank_k: rk,
            map_score: mean_ap(&rel)?,
            mean_target_rank: firsts.iter().sum::<usize>() as f64 / sessions.len() as f64,
        });
    }
    let last = per_round.last().expect("at least round 0");
    tracing::info!(sessions = sessions.len(), rank1 = last.rank_k[&1], map = last.map_score, "benchmark done");
    Ok(EvalResult {
        rank_k: last.rank_k.clone(),
        map_score: last.map_score,
        per_round,
        sessions,
    })
}
