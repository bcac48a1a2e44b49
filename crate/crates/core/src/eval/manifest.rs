//! JSON-lines dataset manifest.
//!
//! An optional first line `{"mode": "cropped" | "scene"}` sets the mode
//! (default cropped); every other non-blank line is one entry:
//!
//! ```json
//! {"image_path": "imgs/0001.jpg", "bbox": [10, 20, 64, 128],
//!  "identity_label": "p17", "descriptions": ["..."],
//!  "attributes": {"head": ["black hair"], "upper": ["red jacket"]}}
//! ```
//!
//! Relative image paths resolve against the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::fcd::SlotAttributes;
use crate::index::IngestItem;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestMode {
    #[default]
    Cropped,
    Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
    /// Ground truth, for metrics only.
    pub identity_label: String,
    #[serde(default)]
    pub descriptions: Vec<String>,
    #[serde(default)]
    pub attributes: SlotAttributes,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    mode: ManifestMode,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub mode: ManifestMode,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl ManifestEntry {
    fn check(&self, mode: ManifestMode) -> Result<(), String> {
        if self.image_path.is_empty() {
            return Err("empty image_path".into());
        }
        if self.identity_label.is_empty() {
            return Err("empty identity_label".into());
        }
        match (mode, self.bbox) {
            (ManifestMode::Scene, None) => Err("scene entries need a bbox".into()),
            (_, Some([_, _, w, h])) if w == 0 || h == 0 => Err("empty bbox".into()),
            _ => Ok(()),
        }
    }

    /// Gallery key: the image path, plus the box in scene mode.
    pub fn image_key(&self, mode: ManifestMode) -> String {
        match (mode, self.bbox) {
            (ManifestMode::Scene, Some([x, y, w, h])) => format!("{}#{x},{y},{w},{h}", self.image_path),
            _ => self.image_path.clone(),
        }
    }
}

impl DatasetManifest {
    /// Checks every entry; errors carry the entry's line in [`Self::to_jsonl`] output.
    pub fn validate(&self) -> Result<(), EvalError> {
        let first_line = usize::from(self.mode != ManifestMode::Cropped) + 1;
        for (i, e) in self.entries.iter().enumerate() {
            e.check(self.mode).map_err(|msg| EvalError::Format { line: first_line + i, msg })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EvalError> {
        let mut m = DatasetManifest {
            base_dir: base_dir.to_owned(),
            ..Default::default()
        };
        let mut first = true;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            if std::mem::take(&mut first) {
                if let Ok(h) = serde_json::from_str::<Header>(line) {
                    m.mode = h.mode;
                    continue;
                }
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| EvalError::Format {
                line: line_no,
                msg: e.to_string(),
            })?;
            e.check(m.mode).map_err(|msg| EvalError::Format { line: line_no, msg })?;
            m.entries.push(e);
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        if self.mode != ManifestMode::Cropped {
            serde_json::to_writer(&mut out, &Header { mode: self.mode }).expect("header serializes");
            out.push(b'\n');
        }
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("entry serializes");
            out.push(b'\n');
        }
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = fs::File::create(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&self, image_path: &str) -> PathBuf {
        let p = Path::new(image_path);
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Label-free ingest items. Identity bytes are the file contents, plus the
    /// little-endian box in scene mode.
    pub fn ingest_items(&self) -> Result<Vec<IngestItem>, EvalError> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.resolve(&e.image_path);
                let mut content = fs::read(&path).map_err(|err| EvalError::Io(format!("{}: {err}", path.display())))?;
                if self.mode == ManifestMode::Scene {
                    for v in e.bbox.expect("validated") {
                        content.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Ok(IngestItem {
                    image_key: e.image_key(self.mode),
                    content,
                    visible: e.attributes.clone(),
                    path: Some(path.to_string_lossy().into_owned()),
                    bbox: e.bbox,
                })
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcd::Slot;
    use proptest::prelude::*;

    const THREE: &str = r#"{"image_path": "a.jpg", "identity_label": "p1", "attributes": {"head": ["black hair"]}}
{"image_path": "b.jpg", "identity_label": "p1", "descriptions": ["a man in a red jacket"]}

{"image_path": "c.jpg", "identity_label": "p2", "bbox": [1, 2, 3, 4]}
"#;

    #[test]
    fn three_lines() {
        let m = DatasetManifest::parse(THREE, Path::new("/data")).unwrap();
        assert_eq!(m.mode, ManifestMode::Cropped);
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].attributes[&Slot::Head], vec!["black hair"]);
        assert_eq!(m.resolve("a.jpg"), Path::new("/data/a.jpg"));
    }

    #[test]
    fn scene_needs_bbox() {
        let text = "{\"mode\": \"scene\"}\n{\"image_path\": \"a.jpg\", \"identity_label\": \"p1\"}\n";
        match DatasetManifest::parse(text, Path::new(".")) {
            Err(EvalError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_number() {
        let text = format!("{THREE}{{\"image_path\": 5}}\n");
        match DatasetManifest::parse(&text, Path::new(".")) {
            Err(EvalError::Format { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn scene_keys_and_content_include_the_box() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.jpg"), b"scene").unwrap();
        let text = "{\"mode\":\"scene\"}\n\
            {\"image_path\":\"s.jpg\",\"identity_label\":\"p1\",\"bbox\":[0,0,10,20],\"attributes\":{\"head\":[\"hat\"]}}\n\
            {\"image_path\":\"s.jpg\",\"identity_label\":\"p2\",\"bbox\":[5,0,10,20],\"attributes\":{\"head\":[\"cap\"]}}\n";
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        let items = m.ingest_items().unwrap();
        assert_eq!(items[0].image_key, "s.jpg#0,0,10,20");
        assert_ne!(items[0].content, items[1].content);
    }

    fn entry() -> impl Strategy<Value = ManifestEntry> {
        let phrase = "[a-z]{1,6}( [a-z]{1,6})?";
        (
            "[a-z0-9/]{1,12}\\.jpg",
            prop::option::of(prop::array::uniform4(1u32..5000)),
            "[a-z0-9]{1,6}",
            prop::collection::vec("[ -~]{0,20}", 0..3),
            prop::collection::btree_map(prop::sample::select(Slot::ALL.to_vec()), prop::collection::vec(phrase, 0..3), 0..4),
        )
            .prop_map(|(image_path, bbox, identity_label, descriptions, attributes)| ManifestEntry {
                image_path,
                bbox,
                identity_label,
                descriptions,
                attributes,
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(entries in prop::collection::vec(entry(), 0..8), scene in any::<bool>()) {
            let mode = if scene { ManifestMode::Scene } else { ManifestMode::Cropped };
            let mut entries = entries;
            if scene {
                for e in &mut entries {
                    e.bbox.get_or_insert([1, 1, 1, 1]);
                }
            }
            let m = DatasetManifest { mode, entries, base_dir: PathBuf::from("/x") };
            let back = DatasetManifest::parse(&m.to_jsonl(), Path::new("/x")).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
