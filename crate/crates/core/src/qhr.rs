//! Query-aware hierarchical retrieval.
//!
//! Every candidate gets a coarse score mixing text and image similarity; the
//! best `top_n` by that score are then re-scored against the query's per-slot
//! context and re-ranked. Candidates outside the top-N keep their coarse order
//! below the re-ranked block.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{cosine_sim, EmbeddingVector, EncoderError};
use crate::fcd::Slot;
use crate::graph::{GraphError, IdentityId, NodeId, SemanticGraph};

/// Tolerance for `alpha + beta = 1` and `sum(w) = 1`.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_TOP_N: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QhrError {
    #[error("invalid weights: {0}")]
    Weight(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One per-slot context entry of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNode {
    pub slot: Slot,
    pub text: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub img_q: Option<EmbeddingVector>,
    pub txt_q: Option<EmbeddingVector>,
    pub sctxt: Vec<ContextNode>,
}

impl Query {
    pub fn new(img_q: Option<EmbeddingVector>, txt_q: Option<EmbeddingVector>, sctxt: Vec<ContextNode>) -> Result<Self, QhrError> {
        if img_q.is_none() && txt_q.is_none() {
            return Err(QhrError::Validation("query needs an image or a text embedding".into()));
        }
        let mut seen = [false; 4];
        for c in &sctxt {
            if std::mem::replace(&mut seen[c.slot.index()], true) {
                return Err(QhrError::Validation(format!("duplicate context slot {}", c.slot)));
            }
        }
        Ok(Self { img_q, txt_q, sctxt })
    }

    pub fn text_only(txt_q: EmbeddingVector, sctxt: Vec<ContextNode>) -> Result<Self, QhrError> {
        Self::new(None, Some(txt_q), sctxt)
    }

    /// Query side compared against candidate images: the image embedding,
    /// or the text embedding when there is none.
    fn visual(&self) -> &EmbeddingVector {
        self.img_q.as_ref().or(self.txt_q.as_ref()).expect("checked in Query::new")
    }

    fn textual(&self) -> &EmbeddingVector {
        self.txt_q.as_ref().or(self.img_q.as_ref()).expect("checked in Query::new")
    }

    fn context(&self, slot: Slot) -> Option<&EmbeddingVector> {
        self.sctxt.iter().find(|c| c.slot == slot).map(|c| &c.embedding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    /// Per-slot weights in [`Slot::ALL`] order.
    pub w: [f64; 4],
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 0.5,
            beta: 0.5,
            eta: 0.5,
            w: [0.25; 4],
        }
    }
}

fn unit(name: &str, x: f64) -> Result<(), QhrError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(QhrError::Weight(format!("{name} = {x} outside [0, 1]")))
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<(), QhrError> {
        unit("gamma", self.gamma)?;
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("eta", self.eta)?;
        if (self.alpha + self.beta - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(QhrError::Weight(format!("alpha + beta = {}", self.alpha + self.beta)));
        }
        for (slot, w) in Slot::ALL.into_iter().zip(self.w) {
            unit(slot.name(), w)?;
        }
        let sum: f64 = self.w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(QhrError::Weight(format!("slot weights sum to {sum}")));
        }
        Ok(())
    }

    pub fn slot_weight(&self, slot: Slot) -> f64 {
        self.w[slot.index()]
    }
}

/// Everything QHR needs to know about one gallery image.
#[derive(Debug, Clone, Copy)]
pub struct CandidateView<'a> {
    pub identity: IdentityId,
    pub image_key: &'a str,
    pub image: &'a EmbeddingVector,
    pub text: &'a EmbeddingVector,
    /// Per-slot semantic embeddings of the candidate's identity.
    pub slots: &'a BTreeMap<Slot, EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub identity: IdentityId,
    pub image_key: String,
    pub s_txt: f64,
    pub s_img: f64,
    pub s_init: f64,
    /// Only computed for the top-N.
    pub s_sctxt: Option<f64>,
    pub s_final: f64,
    pub rank: usize,
}

/// `gamma * Sim(q, img) + (1 - gamma) * Sim(q, txt)`. Without an image
/// embedding the text embedding stands in on the image term.
pub fn query_similarity(q: &Query, cand_img: &EmbeddingVector, cand_txt: &EmbeddingVector, gamma: f64) -> Result<f64, QhrError> {
    unit("gamma", gamma)?;
    let si = cosine_sim(q.visual(), cand_img)?;
    let st = cosine_sim(q.textual(), cand_txt)?;
    Ok(gamma * si + (1.0 - gamma) * st)
}

/// `alpha * s_txt + beta * s_img`.
pub fn initial_score(s_txt: f64, s_img: f64, w: &FusionWeights) -> Result<f64, QhrError> {
    if (w.alpha + w.beta - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(QhrError::Weight(format!("alpha + beta = {}", w.alpha + w.beta)));
    }
    Ok(w.alpha * s_txt + w.beta * s_img)
}

fn by_score_then_key(sa: f64, ka: &str, sb: f64, kb: &str) -> std::cmp::Ordering {
    sb.total_cmp(&sa).then_with(|| ka.cmp(kb))
}

/// Sorts by descending `s_init` (ties: ascending image key) and keeps `n`.
pub fn select_top_n(mut scored: Vec<ScoredCandidate>, n: usize) -> Vec<ScoredCandidate> {
    scored.sort_by(|a, b| by_score_then_key(a.s_init, &a.image_key, b.s_init, &b.image_key));
    scored.truncate(n.max(1));
    scored
}

/// `sum_k w_k * Sim(query slot k, candidate slot k)`; a slot missing on
/// either side contributes 0.
pub fn hierarchical_score(q: &Query, cand_slots: &BTreeMap<Slot, EmbeddingVector>, w: &FusionWeights) -> Result<f64, QhrError> {
    let sum: f64 = w.w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(QhrError::Weight(format!("slot weights sum to {sum}")));
    }
    let mut total = 0.0;
    for slot in Slot::ALL {
        if let (Some(a), Some(b)) = (q.context(slot), cand_slots.get(&slot)) {
            total += w.slot_weight(slot) * cosine_sim(a, b)?;
        }
    }
    Ok(total)
}

/// Mixes `s_init` with `s_sctxt` by `eta`, sorts descending (ties: image key)
/// and assigns ranks from 1.
pub fn rerank(mut top_n: Vec<ScoredCandidate>, eta: f64) -> Result<Vec<ScoredCandidate>, QhrError> {
    unit("eta", eta)?;
    for c in &mut top_n {
        let s = c
            .s_sctxt
            .ok_or_else(|| QhrError::Validation(format!("{} has no hierarchical score", c.image_key)))?;
        c.s_final = eta * c.s_init + (1.0 - eta) * s;
    }
    top_n.sort_by(|a, b| by_score_then_key(a.s_final, &a.image_key, b.s_final, &b.image_key));
    for (i, c) in top_n.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    Ok(top_n)
}

fn coarse(q: &Query, c: &CandidateView<'_>, w: &FusionWeights) -> Result<ScoredCandidate, QhrError> {
    let s_txt = query_similarity(q, c.image, c.text, w.gamma)?;
    let s_img = cosine_sim(q.visual(), c.image)?;
    let s_init = initial_score(s_txt, s_img, w)?;
    Ok(ScoredCandidate {
        identity: c.identity,
        image_key: c.image_key.to_owned(),
        s_txt,
        s_img,
        s_init,
        s_sctxt: None,
        s_final: s_init,
        rank: 0,
    })
}

/// Full ranking of `candidates`: coarse scoring, top-N, per-slot matching,
/// re-ranking, then the remaining candidates in coarse order.
pub fn retrieve(q: &Query, candidates: &[CandidateView<'_>], w: &FusionWeights, top_n: usize) -> Result<Vec<ScoredCandidate>, QhrError> {
    w.validate()?;
    if top_n == 0 {
        return Err(QhrError::Validation("top_n must be at least 1".into()));
    }
    let scored = candidates
        .par_iter()
        .map(|c| coarse(q, c, w))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ordered = select_top_n(scored, usize::MAX);
    let rest = ordered.split_off(top_n.min(ordered.len()));
    let slots: BTreeMap<&str, &BTreeMap<Slot, EmbeddingVector>> = candidates.iter().map(|c| (c.image_key, c.slots)).collect();
    for c in &mut ordered {
        c.s_sctxt = Some(hierarchical_score(q, slots[c.image_key.as_str()], w)?);
    }
    let mut ranking = rerank(ordered, w.eta)?;
    let offset = ranking.len();
    ranking.extend(rest.into_iter().enumerate().map(|(i, mut c)| {
        c.rank = offset + i + 1;
        c
    }));
    Ok(ranking)
}

/// Adds one pseudo-query node per context entry, tagged with `session_id`.
pub fn insert_pseudo_query_nodes(g: &mut SemanticGraph, q: &Query, session_id: &str) -> Result<Vec<NodeId>, QhrError> {
    let entries: Vec<(Slot, String)> = q.sctxt.iter().map(|c| (c.slot, c.text.clone())).collect();
    Ok(g.insert_pseudo_nodes(session_id, &entries)?)
}

pub fn remove_pseudo_query_nodes(g: &mut SemanticGraph, session_id: &str) -> usize {
    g.remove_pseudo_nodes(session_id)
}
