//! Multi-turn retrieval sessions.
//!
//! Round 0 ranks the gallery against the initial query. Every later round
//! folds one feedback text into the expanded query, attaches its phrases to
//! the identities the user has confirmed, and ranks again. Within a slot a
//! later phrase with the same head noun replaces an earlier one: as a
//! refinement when its content words include the earlier ones, otherwise as a
//! contradiction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{cosine_sim, AttributeBag};
use crate::fcd::{canonical_phrase, content_words, head_noun, parse_query_text, FcdError, Slot, StructuredDescription};
use crate::graph::{FeedbackEntity, IdentityId, NodeId, Relation};
use crate::index::{IndexError, RetrievalEngine};
use crate::qhr::{insert_pseudo_query_nodes, remove_pseudo_query_nodes, ScoredCandidate};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session {0} is closed")]
    Closed(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl From<FcdError> for SessionError {
    fn from(e: FcdError) -> Self {
        SessionError::Parse(e.to_string())
    }
}

impl From<crate::qhr::QhrError> for SessionError {
    fn from(e: crate::qhr::QhrError) -> Self {
        SessionError::Index(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub text: String,
    pub parsed: StructuredDescription,
}

/// A phrase of the expanded query that a later one replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacedPhrase {
    pub round: usize,
    pub slot: Slot,
    pub old: String,
    pub new: String,
    pub relation: Relation,
}

/// How a new phrase relates to an existing one in the same slot.
fn relate(old: &str, new: &str) -> Option<Relation> {
    if old == new || head_noun(old) != head_noun(new) {
        return None;
    }
    let (co, cn) = (content_words(old), content_words(new));
    if cn.is_superset(&co) {
        Some(Relation::Refines)
    } else if co.is_superset(&cn) {
        // less specific restatement of what is already known
        None
    } else {
        Some(Relation::Contradicts)
    }
}

/// Folds `(slot, phrase)` into `expanded`. Returns the replaced phrase and
/// relation when the new phrase supersedes an old one.
fn merge_phrase(expanded: &mut StructuredDescription, slot: Slot, phrase: &str) -> Option<(String, Relation)> {
    let p = canonical_phrase(phrase);
    if p.is_empty() {
        return None;
    }
    let list = expanded.slot_mut(slot);
    if list.contains(&p) {
        return None;
    }
    let same_noun = list.iter().position(|o| head_noun(o) == head_noun(&p));
    match same_noun {
        Some(i) => match relate(&list[i], &p) {
            Some(rel) => {
                let old = std::mem::replace(&mut list[i], p);
                Some((old, rel))
            }
            None => None,
        },
        None => {
            list.push(p);
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_txt: f64,
    pub s_img: f64,
    pub s_init: f64,
    pub s_sctxt: Option<f64>,
    pub s_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_key: String,
    pub scores: ScoreBreakdown,
    pub rank: usize,
}

impl From<&ScoredCandidate> for RankedEntry {
    fn from(c: &ScoredCandidate) -> Self {
        RankedEntry {
            image_key: c.image_key.clone(),
            scores: ScoreBreakdown {
                s_txt: c.s_txt,
                s_img: c.s_img,
                s_init: c.s_init,
                s_sctxt: c.s_sctxt,
                s_final: c.s_final,
            },
            rank: c.rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub r: usize,
    pub ranking: Vec<RankedEntry>,
    /// Feedback text that produced this round; `None` for round 0.
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub rounds: Vec<RoundReport>,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalSession {
    id: String,
    round: usize,
    t0: String,
    q0: String,
    feedback: Vec<FeedbackRecord>,
    expanded: StructuredDescription,
    replaced: Vec<ReplacedPhrase>,
    pseudo_nodes: Vec<NodeId>,
    rankings: Vec<Vec<ScoredCandidate>>,
    revealed: BTreeSet<String>,
    closed: bool,
}

impl RetrievalSession {
    /// Parses `q0`, ranks the gallery and stores round 0. `t0` is an optional
    /// leading template kept in the expanded query text.
    pub fn start(engine: &mut RetrievalEngine, session_id: &str, q0: &str, t0: Option<&str>) -> Result<Self, SessionError> {
        if q0.trim().is_empty() {
            return Err(SessionError::Parse("empty query".into()));
        }
        let parsed = parse_query_text(q0)?;
        let mut expanded = StructuredDescription::default();
        for (slot, p) in parsed.phrases() {
            merge_phrase(&mut expanded, slot, p);
        }
        let mut s = RetrievalSession {
            id: session_id.to_owned(),
            round: 0,
            t0: t0.unwrap_or_default().to_owned(),
            q0: q0.to_owned(),
            feedback: Vec::new(),
            expanded,
            replaced: Vec::new(),
            pseudo_nodes: Vec::new(),
            rankings: Vec::new(),
            revealed: BTreeSet::new(),
            closed: false,
        };
        let ranking = s.run_round(engine)?;
        s.rankings.push(ranking);
        tracing::debug!(session = session_id, "session started");
        Ok(s)
    }

    fn ensure_open(&self) -> Result<(), SessionError> {
        if self.closed {
            Err(SessionError::Closed(self.id.clone()))
        } else {
            Ok(())
        }
    }

    /// Refreshes the pseudo-query nodes and ranks against the current
    /// expanded query.
    fn run_round(&mut self, engine: &mut RetrievalEngine) -> Result<Vec<ScoredCandidate>, SessionError> {
        let q = engine.query_for(&self.expanded)?;
        let g = engine.index.graph_mut();
        remove_pseudo_query_nodes(g, &self.id);
        self.pseudo_nodes = insert_pseudo_query_nodes(g, &q, &self.id)?;
        Ok(engine.index.rank(&q, &engine.params)?)
    }

    /// Identities of the revealed images.
    fn revealed_identities(&self, engine: &RetrievalEngine) -> BTreeSet<IdentityId> {
        self.revealed
            .iter()
            .filter_map(|k| engine.index.item(k).map(|it| it.identity))
            .collect()
    }

    fn attach_to_identity(
        engine: &mut RetrievalEngine,
        vid: IdentityId,
        slot: Slot,
        phrase: &str,
    ) -> Result<(), SessionError> {
        let known = engine.index.identity_phrases(vid);
        if known.contains(&(slot, phrase.to_owned())) {
            return Ok(());
        }
        let same_slot: Vec<&String> = known.iter().filter(|(s, _)| *s == slot).map(|(_, p)| p).collect();
        let mut choice: Option<(Relation, NodeId)> = None;
        if let Some(old) = same_slot.iter().find(|o| head_noun(o) == head_noun(phrase)) {
            match relate(old, phrase) {
                Some(rel) => choice = Some((rel, NodeId::phrase(vid, slot, old))),
                None => return Ok(()),
            }
        }
        if choice.is_none() {
            let one = |p: &str| -> AttributeBag { std::iter::once(p).collect() };
            let new = engine.provider.embed_phrases(&one(phrase)).map_err(IndexError::from)?;
            let mut best: Option<(f64, &String)> = None;
            for o in &same_slot {
                let v = engine.provider.embed_phrases(&one(o)).map_err(IndexError::from)?;
                let sim = cosine_sim(&new, &v).map_err(IndexError::from)?;
                if sim > engine.params.theta && best.is_none_or(|(b, _)| sim > b) {
                    best = Some((sim, o));
                }
            }
            choice = Some(match best {
                Some((_, o)) => (Relation::SameAs, NodeId::phrase(vid, slot, o)),
                None => (Relation::BelongsTo, NodeId::identity(vid)),
            });
        }
        let (rel, anchor) = choice.expect("set above");
        let entity = FeedbackEntity {
            slot,
            phrase: phrase.to_owned(),
        };
        let provider = engine.provider.clone();
        engine.index.attach(vid, &entity, rel, &anchor, provider.as_ref())?;
        Ok(())
    }

    /// Folds feedback text into the expanded query, attaches its phrases to
    /// revealed identities and ranks again.
    pub fn submit_feedback(&mut self, engine: &mut RetrievalEngine, text: &str) -> Result<&[ScoredCandidate], SessionError> {
        self.ensure_open()?;
        let parsed = parse_query_text(text)?;
        let round = self.round + 1;
        let phrases: Vec<(Slot, String)> = parsed.phrases().map(|(s, p)| (s, canonical_phrase(p))).collect();
        for (slot, p) in &phrases {
            if let Some((old, relation)) = merge_phrase(&mut self.expanded, *slot, p) {
                tracing::debug!(session = %self.id, %old, new = %p, %relation, "query phrase replaced");
                self.replaced.push(ReplacedPhrase {
                    round,
                    slot: *slot,
                    old,
                    new: p.clone(),
                    relation,
                });
            }
        }
        for vid in self.revealed_identities(engine) {
            for (slot, p) in &phrases {
                Self::attach_to_identity(engine, vid, *slot, p)?;
            }
        }
        let ranking = self.run_round(engine)?;
        self.feedback.push(FeedbackRecord {
            text: text.to_owned(),
            parsed,
        });
        self.rankings.push(ranking);
        self.round = round;
        Ok(self.rankings.last().expect("just pushed"))
    }

    /// Marks one gallery image as a confirmed match. Returns whether it was new.
    pub fn reveal_answer(&mut self, engine: &RetrievalEngine, image_key: &str) -> Result<bool, SessionError> {
        self.ensure_open()?;
        if engine.index.item(image_key).is_none() {
            return Err(SessionError::NotFound(format!("image {image_key}")));
        }
        Ok(self.revealed.insert(image_key.to_owned()))
    }

    /// Removes this session's pseudo-query nodes and returns the report.
    pub fn close(&mut self, engine: &mut RetrievalEngine) -> Result<SessionReport, SessionError> {
        self.ensure_open()?;
        remove_pseudo_query_nodes(engine.index.graph_mut(), &self.id);
        self.pseudo_nodes.clear();
        self.closed = true;
        Ok(self.report())
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            session_id: self.id.clone(),
            rounds: self
                .rankings
                .iter()
                .enumerate()
                .map(|(r, ranking)| RoundReport {
                    r,
                    ranking: ranking.iter().map(RankedEntry::from).collect(),
                    feedback: r.checked_sub(1).map(|i| self.feedback[i].text.clone()),
                })
                .collect(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn rankings(&self) -> &[Vec<ScoredCandidate>] {
        &self.rankings
    }

    pub fn latest_ranking(&self) -> &[ScoredCandidate] {
        self.rankings.last().map(Vec::as_slice).unwrap_or_default()
    }

    pub fn revealed(&self) -> &BTreeSet<String> {
        &self.revealed
    }

    pub fn feedback(&self) -> &[FeedbackRecord] {
        &self.feedback
    }

    pub fn pseudo_nodes(&self) -> &[NodeId] {
        &self.pseudo_nodes
    }

    pub fn replaced(&self) -> &[ReplacedPhrase] {
        &self.replaced
    }

    /// Current expanded query.
    pub fn expanded(&self) -> &StructuredDescription {
        &self.expanded
    }

    /// The expanded query as text: template, initial query, then feedback.
    pub fn expanded_text(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if !self.t0.is_empty() {
            parts.push(&self.t0);
        }
        parts.push(&self.q0);
        parts.extend(self.feedback.iter().map(|f| f.text.as_str()));
        parts.join("\n")
    }

    /// `(slot, phrase)` pairs of the expanded query, for inspection.
    pub fn expanded_phrases(&self) -> BTreeMap<Slot, Vec<String>> {
        Slot::ALL
            .into_iter()
            .map(|s| (s, self.expanded.slot(s).to_vec()))
            .filter(|(_, v)| !v.is_empty())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use crate::index::tests::engine;

    #[test]
    fn start_ranks_round_zero() {
        let mut e = engine();
        let s = RetrievalSession::start(&mut e, "s1", "black hair, red jacket", None).unwrap();
        assert_eq!(s.round(), 0);
        assert_eq!(s.rankings().len(), 1);
        assert_eq!(s.latest_ranking()[0].image_key, "img0");
        assert_eq!(s.pseudo_nodes().len(), 2);
        assert!(matches!(RetrievalSession::start(&mut e, "s2", "", None), Err(SessionError::Parse(_))));
        assert!(matches!(
            RetrievalSession::start(&mut e, "s3", "nothing useful here", None),
            Err(SessionError::Parse(_))
        ));
    }

    #[test]
    fn same_query_same_ranking() {
        let mut a = engine();
        let mut b = engine();
        let sa = RetrievalSession::start(&mut a, "x", "blond hair", None).unwrap();
        let sb = RetrievalSession::start(&mut b, "x", "blond hair", None).unwrap();
        assert_eq!(sa.latest_ranking(), sb.latest_ranking());
    }

    #[test]
    fn refinement_replaces_and_links() {
        let mut e = engine();
        let mut s = RetrievalSession::start(&mut e, "s", "carrying a black backpack", None).unwrap();
        s.reveal_answer(&e, "img0").unwrap();
        s.submit_feedback(&mut e, "a red-and-black backpack").unwrap();
        assert_eq!(s.expanded().accessories, vec!["red-and-black backpack"]);
        assert_eq!(s.replaced()[0].relation, Relation::Refines);
        let vid = e.index.item("img0").unwrap().identity;
        let edge = Edge::new(
            NodeId::phrase(vid, Slot::Accessories, "red-and-black backpack"),
            Relation::Refines,
            NodeId::phrase(vid, Slot::Accessories, "black backpack"),
        );
        assert!(e.index.graph().contains_edge(&edge));
    }

    #[test]
    fn contradiction_latest_wins() {
        let mut ex = StructuredDescription::default();
        assert_eq!(merge_phrase(&mut ex, Slot::Upper, "red jacket"), None);
        assert_eq!(
            merge_phrase(&mut ex, Slot::Upper, "blue jacket"),
            Some(("red jacket".into(), Relation::Contradicts))
        );
        assert_eq!(merge_phrase(&mut ex, Slot::Upper, "jacket"), None);
        assert_eq!(merge_phrase(&mut ex, Slot::Upper, "white shirt"), None);
        assert_eq!(ex.upper, vec!["blue jacket", "white shirt"]);
    }

    #[test]
    fn unconfirmed_feedback_stays_out_of_the_graph() {
        let mut e = engine();
        let before = e.index.graph().clone();
        let mut s = RetrievalSession::start(&mut e, "s", "black hair", None).unwrap();
        for text in ["red jacket", "black backpack", "grey pants", "white hat", "black shoes", "blue shirt"] {
            s.submit_feedback(&mut e, text).unwrap();
        }
        assert_eq!(s.round(), 6);
        assert_eq!(s.rankings().len(), 7);
        let report = s.close(&mut e).unwrap();
        assert_eq!(report.rounds.len(), 7);
        assert_eq!(e.index.graph(), &before);
        assert!(matches!(s.submit_feedback(&mut e, "red jacket"), Err(SessionError::Closed(_))));
        assert!(matches!(s.close(&mut e), Err(SessionError::Closed(_))));
    }

    #[test]
    fn confirmed_feedback_persists_after_close() {
        let mut e = engine();
        let before = e.index.graph().clone();
        let mut s = RetrievalSession::start(&mut e, "s", "white hat", None).unwrap();
        s.reveal_answer(&e, "img2").unwrap();
        s.submit_feedback(&mut e, "black umbrella").unwrap();
        s.close(&mut e).unwrap();
        let after = e.index.graph();
        assert!(before.nodes().all(|(id, p)| after.node(id) == Some(p)));
        assert!(before.edges().all(|x| after.contains_edge(x)));
        let vid = e.index.item("img2").unwrap().identity;
        let added: Vec<_> = after.nodes().filter(|(id, _)| !before.contains_node(id)).map(|(id, _)| id.clone()).collect();
        assert_eq!(added, vec![NodeId::phrase(vid, Slot::Accessories, "black umbrella")]);
    }

    #[test]
    fn reveal_rules() {
        let mut e = engine();
        let mut s = RetrievalSession::start(&mut e, "s", "black hair", None).unwrap();
        assert!(s.reveal_answer(&e, "img0").unwrap());
        assert!(!s.reveal_answer(&e, "img0").unwrap());
        assert_eq!(s.revealed().len(), 1);
        assert!(matches!(s.reveal_answer(&e, "nope"), Err(SessionError::NotFound(_))));
    }

    #[test]
    fn report_json_round_trip() {
        let mut e = engine();
        let mut s = RetrievalSession::start(&mut e, "s", "black hair", Some("Describe the person.")).unwrap();
        s.submit_feedback(&mut e, "red jacket").unwrap();
        assert_eq!(s.expanded_text(), "Describe the person.\nblack hair\nred jacket");
        let r = s.close(&mut e).unwrap();
        assert_eq!(r.rounds[1].feedback.as_deref(), Some("red jacket"));
        assert_eq!(SessionReport::from_json(&r.to_json()).unwrap(), r);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["rounds"][0]["ranking"][0]["scores"]["s_final"].is_number());
    }
}
