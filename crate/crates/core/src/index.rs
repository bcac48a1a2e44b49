//! Searchable gallery.
//!
//! Each ingested image gets a content-hash identity, a generated structured
//! description, an image embedding, a description embedding and a
//! single-image graph. Graphs are aggregated per identity and merged into one
//! global graph; per-identity slot embeddings are derived from that graph and
//! refreshed whenever feedback is attached.
//!
//! On disk an index is a directory holding `items.jsonl`, `embeddings.bin`
//! and `graph.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{AttributeBag, EmbeddingProvider, EmbeddingStore, EmbeddingVector, EncoderError, ImageView};
use crate::fcd::{
    assemble_prompt, canonical_phrase, parse_query_text, parse_structured_description, DescriptionGenerator,
    DescriptionInput, FcdError, Slot, SlotAttributes, StructuredDescription, OBJECT_TEMPLATE, SYSTEM_TEMPLATE,
};
use crate::graph::{
    aggregate_local, assign_identity, attach_feedback, build_single_graph, load_snapshot, merge_global, snapshot,
    AggregateOptions, FeedbackEntity, GraphError, IdentityId, NodeId, NodeKind, ProviderSimilarity, Relation,
    SemanticGraph, DEFAULT_THETA,
};
use crate::qhr::{retrieve, CandidateView, ContextNode, FusionWeights, QhrError, Query, ScoredCandidate, DEFAULT_TOP_N};

const ITEMS_FILE: &str = "items.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.bin";
const GRAPH_FILE: &str = "graph.json";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("duplicate image key {0}")]
    DuplicateKey(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("index format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fcd(#[from] FcdError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Qhr(#[from] QhrError),
}

fn io_err(path: &Path, e: std::io::Error) -> IndexError {
    IndexError::Io(format!("{}: {e}", path.display()))
}

/// One image to ingest. Carries no ground-truth label by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestItem {
    pub image_key: String,
    /// Bytes the identity hash is taken over.
    pub content: Vec<u8>,
    /// What the image shows; mock encoders and generators read this in
    /// place of pixels.
    pub visible: SlotAttributes,
    pub path: Option<String>,
    pub bbox: Option<[u32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub key: String,
    pub identity: IdentityId,
    pub description: StructuredDescription,
    #[serde(skip)]
    pub image: Option<EmbeddingVector>,
    #[serde(skip)]
    pub text: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub weights: FusionWeights,
    pub top_n: usize,
    pub theta: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            weights: FusionWeights::default(),
            top_n: DEFAULT_TOP_N,
            theta: DEFAULT_THETA,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        self.weights.validate()?;
        if self.top_n == 0 {
            return Err(IndexError::Validation("top_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(IndexError::Validation(format!("theta {} outside [0, 1]", self.theta)));
        }
        Ok(())
    }
}

type SlotEmbeddings = BTreeMap<Slot, EmbeddingVector>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GalleryIndex {
    items: BTreeMap<String, GalleryItem>,
    graph: SemanticGraph,
    slot_cache: BTreeMap<IdentityId, SlotEmbeddings>,
}

fn visible_bag(visible: &SlotAttributes) -> AttributeBag {
    visible.values().flatten().map(|p| canonical_phrase(p)).collect()
}

struct Described {
    item: GalleryItem,
    graph: SemanticGraph,
}

fn describe_one(
    it: &IngestItem,
    provider: &dyn EmbeddingProvider,
    generator: &dyn DescriptionGenerator,
) -> Result<Described, IndexError> {
    let identity = assign_identity(&it.content)?;
    let prompt = assemble_prompt(SYSTEM_TEMPLATE, &[], OBJECT_TEMPLATE)?;
    let text = generator.describe(DescriptionInput {
        image_key: &it.image_key,
        visible: &it.visible,
        prompt: &prompt,
    })?;
    let description = parse_structured_description(&text)?;
    let bag = visible_bag(&it.visible);
    let image = provider.embed_image(ImageView {
        key: &it.image_key,
        visible: &bag,
    })?;
    let text_emb = provider.embed_phrases(&description.bag())?;
    let graph = build_single_graph(&it.image_key, identity, None, Some(&description))?;
    Ok(Described {
        item: GalleryItem {
            key: it.image_key.clone(),
            identity,
            description,
            image: Some(image),
            text: Some(text_emb),
            path: it.path.clone(),
            bbox: it.bbox,
        },
        graph,
    })
}

fn identity_phrases_in(graph: &SemanticGraph, vid: IdentityId) -> BTreeSet<(Slot, String)> {
    let contradicted: BTreeSet<&NodeId> = graph
        .edges()
        .filter(|e| e.rel == Relation::Contradicts)
        .map(|e| &e.dst)
        .collect();
    graph
        .identity_members(vid)
        .filter(|id| id.kind == NodeKind::Semantic && !contradicted.contains(id))
        .filter_map(|id| {
            let p = graph.node(id)?;
            Some((p.slot?, p.phrase.clone()?))
        })
        .collect()
}

fn compute_slots_in(graph: &SemanticGraph, vid: IdentityId, provider: &dyn EmbeddingProvider) -> Result<SlotEmbeddings, IndexError> {
    let mut bags: BTreeMap<Slot, AttributeBag> = BTreeMap::new();
    for (slot, phrase) in identity_phrases_in(graph, vid) {
        bags.entry(slot).or_default().insert(&phrase);
    }
    bags.into_iter()
        .map(|(slot, bag)| Ok((slot, provider.embed_phrases(&bag)?)))
        .collect()
}

impl GalleryIndex {
    /// Builds an index. `theta` is the weak-edge threshold for local aggregation.
    pub fn build(
        items: &[IngestItem],
        provider: &dyn EmbeddingProvider,
        generator: &dyn DescriptionGenerator,
        theta: f64,
    ) -> Result<Self, IndexError> {
        let mut out = GalleryIndex::default();
        out.extend(items, provider, generator, theta)?;
        Ok(out)
    }

    /// Adds new images; keys already indexed are rejected. Returns the number
    /// added. Nothing changes on error.
    ///
    /// Weak edges are only computed among the new images of an identity, so a
    /// byte-identical re-upload does not link to the earlier copy.
    pub fn extend(
        &mut self,
        items: &[IngestItem],
        provider: &dyn EmbeddingProvider,
        generator: &dyn DescriptionGenerator,
        theta: f64,
    ) -> Result<usize, IndexError> {
        let mut seen = BTreeSet::new();
        for it in items {
            if it.image_key.is_empty() {
                return Err(IndexError::Validation("empty image key".into()));
            }
            if !seen.insert(it.image_key.as_str()) || self.items.contains_key(&it.image_key) {
                return Err(IndexError::DuplicateKey(it.image_key.clone()));
            }
        }
        let described = items
            .par_iter()
            .map(|it| describe_one(it, provider, generator))
            .collect::<Result<Vec<_>, _>>()?;

        let mut by_identity: BTreeMap<IdentityId, Vec<SemanticGraph>> = BTreeMap::new();
        let mut new_items = Vec::with_capacity(described.len());
        for d in described {
            by_identity.entry(d.item.identity).or_default().push(d.graph);
            new_items.push(d.item);
        }
        let touched: Vec<IdentityId> = by_identity.keys().copied().collect();
        let mut parts = by_identity
            .into_par_iter()
            .map(|(_, graphs)| {
                let sim = ProviderSimilarity::new(provider);
                aggregate_local(&graphs, &sim, theta, AggregateOptions::default())
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !self.graph.is_empty() {
            parts.insert(0, self.graph.clone());
        }
        let graph = merge_global(&parts)?;

        let mut slot_cache = BTreeMap::new();
        for vid in &touched {
            slot_cache.insert(*vid, compute_slots_in(&graph, *vid, provider)?);
        }
        let added = new_items.len();
        self.graph = graph;
        self.slot_cache.extend(slot_cache);
        self.items.extend(new_items.into_iter().map(|it| (it.key.clone(), it)));
        tracing::info!(added, items = self.items.len(), nodes = self.graph.node_count(), edges = self.graph.edge_count(), "index extended");
        Ok(added)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &GalleryItem> {
        self.items.values()
    }

    pub fn item(&self, key: &str) -> Option<&GalleryItem> {
        self.items.get(key)
    }

    pub fn graph(&self) -> &SemanticGraph {
        &self.graph
    }

    pub(crate) fn graph_mut(&mut self) -> &mut SemanticGraph {
        &mut self.graph
    }

    pub fn slot_embeddings(&self, vid: IdentityId) -> Option<&SlotEmbeddings> {
        self.slot_cache.get(&vid)
    }

    /// Current `(slot, phrase)` knowledge about `vid`: every phrase node of
    /// the identity except those a later feedback phrase contradicts.
    pub fn identity_phrases(&self, vid: IdentityId) -> BTreeSet<(Slot, String)> {
        identity_phrases_in(&self.graph, vid)
    }

    fn compute_slots(&self, vid: IdentityId, provider: &dyn EmbeddingProvider) -> Result<SlotEmbeddings, IndexError> {
        compute_slots_in(&self.graph, vid, provider)
    }

    fn refresh_all(&mut self, provider: &dyn EmbeddingProvider) -> Result<(), IndexError> {
        let ids: Vec<IdentityId> = self.graph.identities().collect();
        let cache = ids
            .par_iter()
            .map(|&vid| Ok((vid, self.compute_slots(vid, provider)?)))
            .collect::<Result<BTreeMap<_, _>, IndexError>>()?;
        self.slot_cache = cache;
        Ok(())
    }

    pub fn refresh_identity(&mut self, vid: IdentityId, provider: &dyn EmbeddingProvider) -> Result<(), IndexError> {
        let slots = self.compute_slots(vid, provider)?;
        self.slot_cache.insert(vid, slots);
        Ok(())
    }

    /// Attaches a feedback phrase to `vid` and refreshes its slot embeddings.
    pub fn attach(
        &mut self,
        vid: IdentityId,
        entity: &FeedbackEntity,
        rel: Relation,
        anchor: &NodeId,
        provider: &dyn EmbeddingProvider,
    ) -> Result<NodeId, IndexError> {
        let id = attach_feedback(&mut self.graph, vid, entity, rel, anchor)?;
        self.refresh_identity(vid, provider)?;
        Ok(id)
    }

    /// Ranks the whole gallery against `q`.
    pub fn rank(&self, q: &Query, params: &RetrievalParams) -> Result<Vec<ScoredCandidate>, IndexError> {
        const EMPTY: &SlotEmbeddings = &BTreeMap::new();
        let views = self
            .items
            .values()
            .map(|it| {
                let (Some(image), Some(text)) = (it.image.as_ref(), it.text.as_ref()) else {
                    return Err(IndexError::Format(format!("item {} has no embeddings", it.key)));
                };
                Ok(CandidateView {
                    identity: it.identity,
                    image_key: &it.key,
                    image,
                    text,
                    slots: self.slot_cache.get(&it.identity).unwrap_or(EMPTY),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if views.is_empty() {
            return Ok(Vec::new());
        }
        Ok(retrieve(q, &views, &params.weights, params.top_n)?)
    }

    fn embeddings_store(&self) -> Result<EmbeddingStore, IndexError> {
        let dim = self
            .items
            .values()
            .find_map(|it| it.image.as_ref().map(EmbeddingVector::dim))
            .unwrap_or(crate::encoders::DEFAULT_DIM);
        let mut store = EmbeddingStore::new(dim)?;
        for it in self.items.values() {
            if let (Some(i), Some(t)) = (&it.image, &it.text) {
                store.insert(format!("image/{}", it.key), i.clone())?;
                store.insert(format!("text/{}", it.key), t.clone())?;
            }
        }
        Ok(store)
    }

    /// The three on-disk artifacts as bytes, in file order.
    pub fn to_bytes(&self) -> Result<[Vec<u8>; 3], IndexError> {
        let mut items = Vec::new();
        for it in self.items.values() {
            serde_json::to_writer(&mut items, it).map_err(|e| IndexError::Format(e.to_string()))?;
            items.push(b'\n');
        }
        Ok([items, self.embeddings_store()?.to_bytes(), snapshot(&self.graph)])
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let files = self.to_bytes()?;
        for (name, bytes) in [ITEMS_FILE, EMBEDDINGS_FILE, GRAPH_FILE].into_iter().zip(files) {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, provider: &dyn EmbeddingProvider) -> Result<Self, IndexError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| io_err(&path, e))
        };
        let store = EmbeddingStore::from_bytes(&read(EMBEDDINGS_FILE)?)?;
        let graph = load_snapshot(&read(GRAPH_FILE)?)?;
        let text = String::from_utf8(read(ITEMS_FILE)?).map_err(|e| IndexError::Format(e.to_string()))?;
        let mut out = GalleryIndex {
            graph,
            ..Default::default()
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut it: GalleryItem =
                serde_json::from_str(line).map_err(|e| IndexError::Format(format!("{ITEMS_FILE} line {}: {e}", n + 1)))?;
            let lookup = |prefix: &str| {
                store
                    .lookup(&format!("{prefix}/{}", it.key))
                    .cloned()
                    .ok_or_else(|| IndexError::Format(format!("missing {prefix} embedding for {}", it.key)))
            };
            it.image = Some(lookup("image")?);
            it.text = Some(lookup("text")?);
            if !out.graph.has_identity(it.identity) {
                return Err(IndexError::Format(format!("identity {} of {} not in graph", it.identity, it.key)));
            }
            if out.items.insert(it.key.clone(), it).is_some() {
                return Err(IndexError::Format("duplicate item key".into()));
            }
        }
        out.refresh_all(provider)?;
        Ok(out)
    }
}

/// An index plus the provider and parameters needed to query it.
#[derive(Clone)]
pub struct RetrievalEngine {
    pub index: GalleryIndex,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub params: RetrievalParams,
}

impl std::fmt::Debug for RetrievalEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalEngine")
            .field("items", &self.index.len())
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl RetrievalEngine {
    pub fn new(index: GalleryIndex, provider: Arc<dyn EmbeddingProvider>, params: RetrievalParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self { index, provider, params })
    }

    /// Text query from a structured description: whole-description text
    /// embedding plus one context entry per described slot.
    pub fn query_for(&self, d: &StructuredDescription) -> Result<Query, IndexError> {
        if d.is_empty() {
            return Err(IndexError::Validation("empty query description".into()));
        }
        let txt = self.provider.embed_phrases(&d.bag())?;
        let mut sctxt = Vec::new();
        for slot in Slot::ALL {
            let bag = d.slot_bag(slot);
            if bag.is_empty() {
                continue;
            }
            let text = bag.iter().collect::<Vec<_>>().join(", ");
            sctxt.push(ContextNode {
                slot,
                text,
                embedding: self.provider.embed_phrases(&bag)?,
            });
        }
        Ok(Query::text_only(txt, sctxt)?)
    }

    pub fn rank(&self, d: &StructuredDescription) -> Result<Vec<ScoredCandidate>, IndexError> {
        let q = self.query_for(d)?;
        self.index.rank(&q, &self.params)
    }

    /// One-shot search over free text; returns at most `top_k` candidates.
    pub fn search(&self, text: &str, top_k: usize) -> Result<Vec<ScoredCandidate>, IndexError> {
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        let d = parse_query_text(text)?;
        let mut r = self.rank(&d)?;
        r.truncate(top_k);
        Ok(r)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoders::MockProvider;
    use crate::fcd::TemplateGenerator;

    pub(crate) fn attrs(pairs: &[(Slot, &str)]) -> SlotAttributes {
        let mut a = SlotAttributes::new();
        for (s, p) in pairs {
            a.entry(*s).or_default().push((*p).to_owned());
        }
        a
    }

    pub(crate) fn small_gallery() -> Vec<IngestItem> {
        let people: [&[(Slot, &str)]; 3] = [
            &[(Slot::Head, "black hair"), (Slot::Upper, "red jacket"), (Slot::Accessories, "black backpack")],
            &[(Slot::Head, "blond hair"), (Slot::Upper, "blue shirt"), (Slot::Lower, "grey pants")],
            &[(Slot::Head, "white hat"), (Slot::Upper, "green coat"), (Slot::Lower, "black shoes")],
        ];
        people
            .iter()
            .enumerate()
            .map(|(i, p)| IngestItem {
                image_key: format!("img{i}"),
                content: format!("pixels-{i}").into_bytes(),
                visible: attrs(p),
                path: None,
                bbox: None,
            })
            .collect()
    }

    pub(crate) fn engine() -> RetrievalEngine {
        let provider = Arc::new(MockProvider::new(64, 7).unwrap().with_image_jitter(0.2));
        let index = GalleryIndex::build(&small_gallery(), provider.as_ref(), &TemplateGenerator, DEFAULT_THETA).unwrap();
        RetrievalEngine::new(index, provider, RetrievalParams::default()).unwrap()
    }

    #[test]
    fn build_and_search() {
        let e = engine();
        assert_eq!(e.index.len(), 3);
        let r = e.search("a man with blond hair, blue shirt", 10).unwrap();
        assert_eq!(r[0].image_key, "img1");
        assert_eq!(r.iter().map(|c| c.rank).collect::<Vec<_>>(), [1, 2, 3]);
        e.index.graph().check_invariants().unwrap();
        for it in e.index.items() {
            assert!(e.index.slot_embeddings(it.identity).is_some());
        }
    }

    #[test]
    fn empty_index_search_is_empty() {
        let provider = Arc::new(MockProvider::new(64, 7).unwrap());
        let index = GalleryIndex::build(&[], provider.as_ref(), &TemplateGenerator, DEFAULT_THETA).unwrap();
        let e = RetrievalEngine::new(index, provider, RetrievalParams::default()).unwrap();
        assert!(e.search("black hair", 5).unwrap().is_empty());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut g = small_gallery();
        g[1].image_key = g[0].image_key.clone();
        let p = MockProvider::new(64, 7).unwrap();
        assert!(matches!(
            GalleryIndex::build(&g, &p, &TemplateGenerator, DEFAULT_THETA),
            Err(IndexError::DuplicateKey(_))
        ));
    }

    #[test]
    fn identical_content_shares_identity() {
        let mut g = small_gallery();
        g[1].content = g[0].content.clone();
        let p = MockProvider::new(64, 7).unwrap();
        let idx = GalleryIndex::build(&g, &p, &TemplateGenerator, DEFAULT_THETA).unwrap();
        assert_eq!(idx.item("img0").unwrap().identity, idx.item("img1").unwrap().identity);
        assert_eq!(idx.graph().identities().count(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let e = engine();
        let dir = tempfile::tempdir().unwrap();
        e.index.save(dir.path()).unwrap();
        let back = GalleryIndex::load(dir.path(), e.provider.as_ref()).unwrap();
        assert_eq!(back, e.index);
        assert_eq!(back.to_bytes().unwrap(), e.index.to_bytes().unwrap());
        std::fs::write(dir.path().join(ITEMS_FILE), "{not json\n").unwrap();
        assert!(matches!(GalleryIndex::load(dir.path(), e.provider.as_ref()), Err(IndexError::Format(_))));
    }

    #[test]
    fn contradicted_phrases_leave_slot_embeddings() {
        let mut e = engine();
        let vid = e.index.item("img0").unwrap().identity;
        let old = NodeId::phrase(vid, Slot::Upper, "red jacket");
        let before = e.index.slot_embeddings(vid).unwrap()[&Slot::Upper].clone();
        let entity = FeedbackEntity {
            slot: Slot::Upper,
            phrase: "blue jacket".into(),
        };
        let provider = e.provider.clone();
        e.index.attach(vid, &entity, Relation::Contradicts, &old, provider.as_ref()).unwrap();
        let phrases = e.index.identity_phrases(vid);
        assert!(phrases.contains(&(Slot::Upper, "blue jacket".into())));
        assert!(!phrases.contains(&(Slot::Upper, "red jacket".into())));
        assert_ne!(e.index.slot_embeddings(vid).unwrap()[&Slot::Upper], before);
    }

    #[test]
    fn extend_matches_one_build() {
        let provider = MockProvider::new(64, 7).unwrap().with_image_jitter(0.2);
        let all = small_gallery();
        let whole = GalleryIndex::build(&all, &provider, &TemplateGenerator, DEFAULT_THETA).unwrap();
        let mut grown = GalleryIndex::build(&all[..1], &provider, &TemplateGenerator, DEFAULT_THETA).unwrap();
        assert_eq!(grown.extend(&all[1..], &provider, &TemplateGenerator, DEFAULT_THETA).unwrap(), 2);
        assert_eq!(grown.to_bytes().unwrap(), whole.to_bytes().unwrap());
        assert_eq!(grown, whole);

        let before = grown.clone();
        let again = grown.extend(&all[2..], &provider, &TemplateGenerator, DEFAULT_THETA);
        assert!(matches!(again, Err(IndexError::DuplicateKey(k)) if k == "img2"));
        assert_eq!(grown, before);
    }
}
