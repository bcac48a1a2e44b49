//! Multi-relational pedestrian semantic graph.
//!
//! Node keys:
//!
//! | kind          | key                          |
//! |---------------|------------------------------|
//! | `Identity`    | 16 hex digits of the pseudo-ID |
//! | `Image`       | gallery image key            |
//! | `Semantic`    | `<vid>/<slot>` (slot node) or `<vid>/<slot>/<phrase>` |
//! | `PseudoQuery` | `<session>/<n>:<slot>`       |
//!
//! Edge directions: image `describes` semantic, slot `contains` phrase,
//! image/semantic `belongs_to` identity, phrase `same_as` phrase (lower key
//! first), feedback phrase `refines`/`contradicts`/... anchor.

mod build;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderError;
use crate::fcd::Slot;

pub use build::{
    aggregate_local, assign_identity, attach_feedback, build_single_graph, merge_global,
    AggregateOptions, EmbeddingTable, FeedbackEntity, ProviderSimilarity, SemanticSimilarity,
    DEFAULT_THETA,
};
pub use snapshot::{load_snapshot, snapshot, SNAPSHOT_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("identity mismatch: {0} vs {1}")]
    IdentityMismatch(IdentityId, IdentityId),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid relation {0:?}")]
    InvalidRelation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Image,
    Semantic,
    Identity,
    PseudoQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub key: String,
}

impl NodeId {
    pub fn new(kind: NodeKind, key: impl Into<String>) -> Self {
        Self { kind, key: key.into() }
    }

    pub fn image(key: &str) -> Self {
        Self::new(NodeKind::Image, key)
    }

    pub fn identity(vid: IdentityId) -> Self {
        Self::new(NodeKind::Identity, vid.to_string())
    }

    pub fn slot(vid: IdentityId, slot: Slot) -> Self {
        Self::new(NodeKind::Semantic, format!("{vid}/{slot}"))
    }

    /// `phrase` must already be canonical.
    pub fn phrase(vid: IdentityId, slot: Slot, phrase: &str) -> Self {
        Self::new(NodeKind::Semantic, format!("{vid}/{slot}/{phrase}"))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.kind, self.key)
    }
}

/// 64-bit content-hash pseudo-identity, rendered as 16 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IdentityId(pub u64);

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Debug for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdentityId({self})")
    }
}

impl FromStr for IdentityId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 {
            return Err(GraphError::Validation(format!("identity {s:?} is not 16 hex digits")));
        }
        u64::from_str_radix(s, 16)
            .map(IdentityId)
            .map_err(|_| GraphError::Validation(format!("identity {s:?} is not hex")))
    }
}

impl Serialize for IdentityId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IdentityId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Valid semantic relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Describes,
    Contains,
    BelongsTo,
    SameAs,
    Refines,
    Contradicts,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Describes,
        Relation::Contains,
        Relation::BelongsTo,
        Relation::SameAs,
        Relation::Refines,
        Relation::Contradicts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Describes => "describes",
            Relation::Contains => "contains",
            Relation::BelongsTo => "belongs_to",
            Relation::SameAs => "same_as",
            Relation::Refines => "refines",
            Relation::Contradicts => "contradicts",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| GraphError::InvalidRelation(s.to_owned()))
    }
}

/// Node payload. Semantic phrase nodes carry slot, canonical phrase and the
/// key their embedding is stored under; pseudo-query nodes carry their session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub rel: Relation,
    pub dst: NodeId,
}

impl Edge {
    pub fn new(src: NodeId, rel: Relation, dst: NodeId) -> Self {
        Self { src, rel, dst }
    }
}

/// Node and edge sets with an identity index. All collections are ordered,
/// so equal graphs compare and serialize identically.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemanticGraph {
    nodes: BTreeMap<NodeId, NodePayload>,
    edges: BTreeSet<Edge>,
    identity_index: BTreeMap<IdentityId, BTreeSet<NodeId>>,
}

impl SemanticGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &NodePayload)> {
        self.nodes.iter()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodePayload> {
        self.nodes.get(id)
    }

    pub fn contains_node(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn contains_edge(&self, e: &Edge) -> bool {
        self.edges.contains(e)
    }

    pub fn identities(&self) -> impl Iterator<Item = IdentityId> + '_ {
        self.identity_index.keys().copied()
    }

    pub fn has_identity(&self, vid: IdentityId) -> bool {
        self.nodes.contains_key(&NodeId::identity(vid))
    }

    /// Nodes linked to `vid` by `belongs_to`.
    pub fn identity_members(&self, vid: IdentityId) -> impl Iterator<Item = &NodeId> {
        self.identity_index.get(&vid).into_iter().flatten()
    }

    /// `(slot, canonical phrase)` of every phrase node of `vid`.
    pub fn identity_phrases(&self, vid: IdentityId) -> impl Iterator<Item = (Slot, &str)> {
        self.identity_members(vid).filter_map(|id| {
            let p = self.nodes.get(id)?;
            match (id.kind, p.slot, p.phrase.as_deref()) {
                (NodeKind::Semantic, Some(slot), Some(phrase)) => Some((slot, phrase)),
                _ => None,
            }
        })
    }

    pub fn edges_from<'a>(&'a self, src: &'a NodeId) -> impl Iterator<Item = &'a Edge> + 'a {
        let lo = Edge::new(src.clone(), Relation::Describes, NodeId::new(NodeKind::Image, ""));
        self.edges.range(lo..).take_while(move |e| &e.src == src)
    }

    /// Inserts a node; an existing node with a different payload is a conflict.
    pub fn add_node(&mut self, id: NodeId, payload: NodePayload) -> Result<bool, GraphError> {
        match self.nodes.get(&id) {
            Some(existing) if *existing == payload => Ok(false),
            Some(existing) => Err(GraphError::Conflict(format!(
                "node {id} has payload {existing:?}, refusing {payload:?}"
            ))),
            None => {
                if id.kind == NodeKind::Identity {
                    let vid: IdentityId = id.key.parse()?;
                    self.identity_index.entry(vid).or_default();
                }
                self.nodes.insert(id, payload);
                Ok(true)
            }
        }
    }

    /// Inserts an edge between existing nodes; returns whether it was new.
    pub fn add_edge(&mut self, edge: Edge) -> Result<bool, GraphError> {
        for end in [&edge.src, &edge.dst] {
            if !self.nodes.contains_key(end) {
                return Err(GraphError::NotFound(format!("edge endpoint {end}")));
            }
        }
        if edge.rel == Relation::BelongsTo && edge.dst.kind == NodeKind::Identity {
            let vid: IdentityId = edge.dst.key.parse()?;
            self.identity_index.entry(vid).or_default().insert(edge.src.clone());
        }
        Ok(self.edges.insert(edge))
    }

    /// Removes a node and every incident edge.
    pub(crate) fn remove_node(&mut self, id: &NodeId) -> bool {
        if self.nodes.remove(id).is_none() {
            return false;
        }
        let doomed: Vec<Edge> = self.edges.iter().filter(|e| &e.src == id || &e.dst == id).cloned().collect();
        for e in doomed {
            self.edges.remove(&e);
        }
        for members in self.identity_index.values_mut() {
            members.remove(id);
        }
        if id.kind == NodeKind::Identity {
            if let Ok(vid) = id.key.parse() {
                self.identity_index.remove(&vid);
            }
        }
        true
    }

    /// Set union with `other`, failing on payload conflicts.
    pub fn union_with(&mut self, other: &SemanticGraph) -> Result<(), GraphError> {
        for (id, p) in &other.nodes {
            self.add_node(id.clone(), p.clone())?;
        }
        for e in &other.edges {
            self.add_edge(e.clone())?;
        }
        Ok(())
    }

    /// Session ids that currently own pseudo-query nodes.
    pub fn pseudo_sessions(&self) -> BTreeSet<&str> {
        self.nodes
            .iter()
            .filter(|(id, _)| id.kind == NodeKind::PseudoQuery)
            .filter_map(|(_, p)| p.session.as_deref())
            .collect()
    }

    /// Adds one ephemeral pseudo-query node per `(slot, phrase)` entry, tagged
    /// with `session_id`. Fails if the session already owns nodes.
    pub fn insert_pseudo_nodes(&mut self, session_id: &str, entries: &[(Slot, String)]) -> Result<Vec<NodeId>, GraphError> {
        if session_id.is_empty() {
            return Err(GraphError::Validation("empty session id".into()));
        }
        if self.pseudo_sessions().contains(session_id) {
            return Err(GraphError::Conflict(format!("session {session_id} already has pseudo-query nodes")));
        }
        let mut ids = Vec::with_capacity(entries.len());
        for (n, (slot, phrase)) in entries.iter().enumerate() {
            let id = NodeId::new(NodeKind::PseudoQuery, format!("{session_id}/{n}:{slot}"));
            self.add_node(
                id.clone(),
                NodePayload {
                    slot: Some(*slot),
                    phrase: Some(phrase.clone()),
                    embedding_key: None,
                    session: Some(session_id.to_owned()),
                },
            )?;
            ids.push(id);
        }
        Ok(ids)
    }

    /// Drops every pseudo-query node of `session_id`; returns how many.
    pub fn remove_pseudo_nodes(&mut self, session_id: &str) -> usize {
        let doomed: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(id, p)| id.kind == NodeKind::PseudoQuery && p.session.as_deref() == Some(session_id))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &doomed {
            self.remove_node(id);
        }
        doomed.len()
    }

    /// Checks structural invariants: edge endpoints exist, the identity index
    /// matches `belongs_to` edges, every identity key has an identity node.
    pub fn check_invariants(&self) -> Result<(), GraphError> {
        let mut expected: BTreeMap<IdentityId, BTreeSet<NodeId>> = BTreeMap::new();
        for id in self.nodes.keys().filter(|id| id.kind == NodeKind::Identity) {
            expected.entry(id.key.parse()?).or_default();
        }
        for e in &self.edges {
            for end in [&e.src, &e.dst] {
                if !self.nodes.contains_key(end) {
                    return Err(GraphError::Format(format!("edge references missing node {end}")));
                }
            }
            if e.rel == Relation::BelongsTo && e.dst.kind == NodeKind::Identity {
                expected.entry(e.dst.key.parse()?).or_default().insert(e.src.clone());
            }
        }
        if expected != self.identity_index {
            return Err(GraphError::Format("identity index disagrees with belongs_to edges".into()));
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        nodes: BTreeMap<NodeId, NodePayload>,
        edges: BTreeSet<Edge>,
        identity_index: BTreeMap<IdentityId, BTreeSet<NodeId>>,
    ) -> Self {
        Self {
            nodes,
            edges,
            identity_index,
        }
    }

    pub(crate) fn identity_index(&self) -> &BTreeMap<IdentityId, BTreeSet<NodeId>> {
        &self.identity_index
    }
}
