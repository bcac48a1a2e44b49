use std::collections::{BTreeMap, BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::{Edge, GraphError, IdentityId, NodeId, NodeKind, NodePayload, Relation, SemanticGraph};
use crate::encoders::{cosine_sim, AttributeBag, EmbeddingProvider, EmbeddingVector, StoreProvider};
use crate::fcd::{canonical_phrase, Slot, StructuredDescription};

/// Default weak-edge similarity threshold.
pub const DEFAULT_THETA: f64 = 0.5;

/// Pseudo-identity of an image: the first 8 bytes of its SHA-256, big-endian.
pub fn assign_identity(image_bytes: &[u8]) -> Result<IdentityId, GraphError> {
    if image_bytes.is_empty() {
        return Err(GraphError::Validation("cannot hash an empty image".into()));
    }
    let digest = Sha256::digest(image_bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    Ok(IdentityId(u64::from_be_bytes(head)))
}

fn phrase_payload(slot: Slot, phrase: &str) -> NodePayload {
    NodePayload {
        slot: Some(slot),
        phrase: Some(phrase.to_owned()),
        embedding_key: Some(StoreProvider::phrase_key(phrase)),
        session: None,
    }
}

fn slot_payload(slot: Slot) -> NodePayload {
    NodePayload {
        slot: Some(slot),
        ..Default::default()
    }
}

/// Single-image graph: one image node, one identity node, a slot node per
/// described slot and a phrase node per distinct canonical phrase of either
/// description.
pub fn build_single_graph(
    image_key: &str,
    vid: IdentityId,
    y_ori: Option<&StructuredDescription>,
    y_ren: Option<&StructuredDescription>,
) -> Result<SemanticGraph, GraphError> {
    if image_key.is_empty() {
        return Err(GraphError::Validation("empty image key".into()));
    }
    let phrases: BTreeSet<(Slot, String)> = y_ori
        .into_iter()
        .chain(y_ren)
        .flat_map(|d| d.phrases().map(|(s, p)| (s, canonical_phrase(p))))
        .collect();
    if phrases.is_empty() {
        return Err(GraphError::Validation(format!("image {image_key}: both descriptions are empty")));
    }

    let mut g = SemanticGraph::new();
    let image = NodeId::image(image_key);
    let identity = NodeId::identity(vid);
    g.add_node(
        image.clone(),
        NodePayload {
            embedding_key: Some(StoreProvider::image_key(image_key)),
            ..Default::default()
        },
    )?;
    g.add_node(identity.clone(), NodePayload::default())?;
    g.add_edge(Edge::new(image.clone(), Relation::BelongsTo, identity.clone()))?;

    for (slot, phrase) in &phrases {
        let slot_node = NodeId::slot(vid, *slot);
        if g.add_node(slot_node.clone(), slot_payload(*slot))? {
            g.add_edge(Edge::new(image.clone(), Relation::Describes, slot_node.clone()))?;
            g.add_edge(Edge::new(slot_node.clone(), Relation::BelongsTo, identity.clone()))?;
        }
        let node = NodeId::phrase(vid, *slot, phrase);
        g.add_node(node.clone(), phrase_payload(*slot, phrase))?;
        g.add_edge(Edge::new(image.clone(), Relation::Describes, node.clone()))?;
        g.add_edge(Edge::new(slot_node, Relation::Contains, node.clone()))?;
        g.add_edge(Edge::new(node, Relation::BelongsTo, identity.clone()))?;
    }
    Ok(g)
}

/// Similarity between two phrase nodes.
pub trait SemanticSimilarity {
    fn similarity(&self, a: (&NodeId, &NodePayload), b: (&NodeId, &NodePayload)) -> Result<f64, GraphError>;
}

/// Cosine of the provider embeddings of the two canonical phrases.
pub struct ProviderSimilarity<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: std::cell::RefCell<HashMap<String, EmbeddingVector>>,
}

impl<'a> ProviderSimilarity<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        Self {
            provider,
            cache: Default::default(),
        }
    }

    fn embed(&self, phrase: &str) -> Result<EmbeddingVector, GraphError> {
        if let Some(v) = self.cache.borrow().get(phrase) {
            return Ok(v.clone());
        }
        let bag: AttributeBag = std::iter::once(phrase).collect();
        let v = self.provider.embed_phrases(&bag)?;
        self.cache.borrow_mut().insert(phrase.to_owned(), v.clone());
        Ok(v)
    }
}

fn phrase_of<'p>(node: (&NodeId, &'p NodePayload)) -> Result<&'p str, GraphError> {
    node.1
        .phrase
        .as_deref()
        .ok_or_else(|| GraphError::Validation(format!("node {} has no phrase", node.0)))
}

impl SemanticSimilarity for ProviderSimilarity<'_> {
    fn similarity(&self, a: (&NodeId, &NodePayload), b: (&NodeId, &NodePayload)) -> Result<f64, GraphError> {
        let (va, vb) = (self.embed(phrase_of(a)?)?, self.embed(phrase_of(b)?)?);
        Ok(cosine_sim(&va, &vb)?)
    }
}

/// Explicit vectors keyed by node `embedding_key`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable(pub HashMap<String, EmbeddingVector>);

impl SemanticSimilarity for EmbeddingTable {
    fn similarity(&self, a: (&NodeId, &NodePayload), b: (&NodeId, &NodePayload)) -> Result<f64, GraphError> {
        let get = |n: (&NodeId, &NodePayload)| {
            n.1.embedding_key
                .as_deref()
                .and_then(|k| self.0.get(k))
                .ok_or_else(|| GraphError::NotFound(format!("embedding for {}", n.0)))
        };
        Ok(cosine_sim(get(a)?, get(b)?)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregateOptions {
    /// Compare phrase nodes across slots too (head vs upper, ...).
    pub cross_slot: bool,
}

fn single_identity(g: &SemanticGraph) -> Result<IdentityId, GraphError> {
    let mut ids = g.identities();
    match (ids.next(), ids.next()) {
        (Some(vid), None) => Ok(vid),
        (Some(a), Some(b)) => Err(GraphError::IdentityMismatch(a, b)),
        (None, _) => Err(GraphError::Validation("graph has no identity".into())),
    }
}

/// Unions the single-image graphs of one identity, then links every pair of
/// phrase nodes described by different images whose similarity exceeds
/// `theta` (strictly) with a `same_as` edge.
pub fn aggregate_local(
    graphs: &[SemanticGraph],
    sim: &dyn SemanticSimilarity,
    theta: f64,
    opts: AggregateOptions,
) -> Result<SemanticGraph, GraphError> {
    let Some(first) = graphs.first() else {
        return Err(GraphError::Validation("nothing to aggregate".into()));
    };
    if !theta.is_finite() {
        return Err(GraphError::Validation(format!("theta {theta} is not finite")));
    }
    let vid = single_identity(first)?;
    let mut out = SemanticGraph::new();
    for g in graphs {
        let other = single_identity(g)?;
        if other != vid {
            return Err(GraphError::IdentityMismatch(vid, other));
        }
        out.union_with(g)?;
    }

    let mut sources: BTreeMap<&NodeId, BTreeSet<&NodeId>> = BTreeMap::new();
    for e in out.edges() {
        if e.rel == Relation::Describes && e.src.kind == NodeKind::Image {
            sources.entry(&e.dst).or_default().insert(&e.src);
        }
    }
    let phrase_nodes: Vec<(&NodeId, &NodePayload)> = out
        .nodes()
        .filter(|(id, p)| id.kind == NodeKind::Semantic && p.phrase.is_some())
        .collect();

    let mut weak = Vec::new();
    for (i, a) in phrase_nodes.iter().enumerate() {
        for b in &phrase_nodes[i + 1..] {
            if !opts.cross_slot && a.1.slot != b.1.slot {
                continue;
            }
            let (sa, sb) = (sources.get(a.0), sources.get(b.0));
            let cross_image = match (sa, sb) {
                (Some(sa), Some(sb)) => sa.iter().any(|x| sb.iter().any(|y| x != y)),
                _ => false,
            };
            if !cross_image {
                continue;
            }
            if sim.similarity(*a, *b)? > theta {
                weak.push(Edge::new(a.0.clone(), Relation::SameAs, b.0.clone()));
            }
        }
    }
    for e in weak {
        out.add_edge(e)?;
    }
    Ok(out)
}

/// Union of identity subgraphs into one global graph.
pub fn merge_global(locals: &[SemanticGraph]) -> Result<SemanticGraph, GraphError> {
    let mut out = SemanticGraph::new();
    for g in locals {
        out.union_with(g)?;
    }
    Ok(out)
}

/// A phrase to attach during query expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackEntity {
    pub slot: Slot,
    pub phrase: String,
}

/// Attaches a feedback phrase to identity `vid`: adds the phrase node (if
/// new), the edge `(phrase, rel, anchor)` and `phrase belongs_to vid`.
/// Existing payloads are never modified. Returns the phrase node id.
pub fn attach_feedback(
    g: &mut SemanticGraph,
    vid: IdentityId,
    entity: &FeedbackEntity,
    rel: Relation,
    anchor: &NodeId,
) -> Result<NodeId, GraphError> {
    let identity = NodeId::identity(vid);
    if !g.contains_node(&identity) {
        return Err(GraphError::NotFound(format!("identity {vid}")));
    }
    if !g.contains_node(anchor) {
        return Err(GraphError::NotFound(format!("anchor {anchor}")));
    }
    let phrase = canonical_phrase(&entity.phrase);
    if phrase.is_empty() {
        return Err(GraphError::Validation("empty feedback phrase".into()));
    }
    let node = NodeId::phrase(vid, entity.slot, &phrase);
    if &node == anchor {
        return Err(GraphError::Validation("feedback phrase cannot anchor to itself".into()));
    }
    if !g.contains_node(&node) {
        g.add_node(node.clone(), phrase_payload(entity.slot, &phrase))?;
    }
    g.add_edge(Edge::new(node.clone(), rel, anchor.clone()))?;
    g.add_edge(Edge::new(node.clone(), Relation::BelongsTo, identity))?;
    Ok(node)
}
