//! JSON snapshot of a [`SemanticGraph`].
//!
//! ```json
//! {"version": 1,
//!  "nodes": [{"kind": "image", "key": "...", "embedding_key": "..."}],
//!  "edges": [{"src": {...}, "rel": "describes", "dst": {...}}],
//!  "identities": [{"id": "00ab...", "members": [{...}]}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, IdentityId, NodeId, NodeKind, NodePayload, SemanticGraph};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    kind: NodeKind,
    key: String,
    #[serde(flatten)]
    payload: NodePayload,
}

#[derive(Serialize, Deserialize)]
struct IdentityRecord {
    id: IdentityId,
    members: Vec<NodeId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    version: u32,
    nodes: Vec<NodeRecord>,
    edges: Vec<Edge>,
    identities: Vec<IdentityRecord>,
}

fn to_file(g: &SemanticGraph) -> SnapshotFile {
    SnapshotFile {
        version: SNAPSHOT_VERSION,
        nodes: g
            .nodes()
            .map(|(id, p)| NodeRecord {
                kind: id.kind,
                key: id.key.clone(),
                payload: p.clone(),
            })
            .collect(),
        edges: g.edges().cloned().collect(),
        identities: g
            .identity_index()
            .iter()
            .map(|(id, m)| IdentityRecord {
                id: *id,
                members: m.iter().cloned().collect(),
            })
            .collect(),
    }
}

fn from_file(f: SnapshotFile) -> Result<SemanticGraph, GraphError> {
    if f.version != SNAPSHOT_VERSION {
        return Err(GraphError::Format(format!("unsupported snapshot version {}", f.version)));
    }
    let mut nodes = BTreeMap::new();
    for n in f.nodes {
        let id = NodeId::new(n.kind, n.key);
        if nodes.insert(id.clone(), n.payload).is_some() {
            return Err(GraphError::Format(format!("duplicate node {id}")));
        }
    }
    let edges: BTreeSet<Edge> = f.edges.into_iter().collect();
    let mut index = BTreeMap::new();
    for r in f.identities {
        if index.insert(r.id, r.members.into_iter().collect()).is_some() {
            return Err(GraphError::Format(format!("duplicate identity {}", r.id)));
        }
    }
    let g = SemanticGraph::from_parts(nodes, edges, index);
    g.check_invariants()?;
    Ok(g)
}

/// Serializes `g` to pretty-printed JSON bytes.
pub fn snapshot(g: &SemanticGraph) -> Vec<u8> {
    serde_json::to_vec_pretty(&to_file(g)).expect("snapshot records always serialize")
}

/// Parses and validates a snapshot.
pub fn load_snapshot(bytes: &[u8]) -> Result<SemanticGraph, GraphError> {
    let f: SnapshotFile = serde_json::from_slice(bytes).map_err(|e| GraphError::Format(e.to_string()))?;
    from_file(f)
}

impl SemanticGraph {
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, snapshot(self)).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let bytes = std::fs::read(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        load_snapshot(&bytes)
    }
}
