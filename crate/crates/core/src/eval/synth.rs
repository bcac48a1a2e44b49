//! Seeded synthetic gallery: identities wearing one colour of each of a fixed
//! set of garments and objects, photographed from several views that each
//! hide a few attributes.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, EvalError, ManifestEntry, ManifestMode};
use crate::fcd::{Slot, SlotAttributes};

/// Attribute nouns with their slots; every identity has one of each.
pub const SYNTH_NOUNS: [(&str, Slot); 8] = [
    ("hair", Slot::Head),
    ("hat", Slot::Head),
    ("jacket", Slot::Upper),
    ("shirt", Slot::Upper),
    ("pants", Slot::Lower),
    ("shoes", Slot::Lower),
    ("backpack", Slot::Accessories),
    ("bag", Slot::Accessories),
];

pub const SYNTH_COLOURS: [&str; 10] = ["black", "white", "red", "blue", "green", "grey", "brown", "yellow", "pink", "purple"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub identities: usize,
    pub views: usize,
    /// Attributes per identity, taken from the front of [`SYNTH_NOUNS`].
    pub attributes: usize,
    /// Attributes each view hides.
    pub hidden_per_view: usize,
    /// Attributes named by each view's caption.
    pub caption_attributes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 200,
            views: 3,
            attributes: 8,
            hidden_per_view: 2,
            caption_attributes: 2,
            seed: 0,
        }
    }
}

/// Writes one small binary file per view under `dir/images` and returns the
/// manifest (relative paths, base directory `dir`).
pub fn synth_gallery(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest, EvalError> {
    if cfg.attributes == 0 || cfg.attributes > SYNTH_NOUNS.len() {
        return Err(EvalError::Validation(format!("attributes must be in 1..={}", SYNTH_NOUNS.len())));
    }
    if cfg.hidden_per_view >= cfg.attributes || cfg.caption_attributes == 0 || cfg.caption_attributes > cfg.attributes {
        return Err(EvalError::Validation("hidden/caption attribute counts out of range".into()));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| EvalError::Io(format!("{}: {e}", images.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.identities * cfg.views);
    for id in 0..cfg.identities {
        let label = format!("p{id:04}");
        let outfit: Vec<(Slot, String)> = SYNTH_NOUNS[..cfg.attributes]
            .iter()
            .map(|(noun, slot)| (*slot, format!("{} {noun}", SYNTH_COLOURS.choose(&mut rng).expect("non-empty"))))
            .collect();
        for view in 0..cfg.views {
            let mut order: Vec<usize> = (0..outfit.len()).collect();
            order.shuffle(&mut rng);
            let mut shown: Vec<usize> = order[cfg.hidden_per_view..].to_vec();
            shown.sort_unstable();
            let mut attributes = SlotAttributes::new();
            for &i in &shown {
                attributes.entry(outfit[i].0).or_default().push(outfit[i].1.clone());
            }
            let caption: Vec<&str> = shown
                .choose_multiple(&mut rng, cfg.caption_attributes.min(shown.len()))
                .map(|&i| outfit[i].1.as_str())
                .collect();
            let rel = format!("images/{label}_{view}.bin");
            let mut bytes = format!("synthetic {label} view {view}\n").into_bytes();
            bytes.extend((0..32).map(|_| rng.random::<u8>()));
            let path = dir.join(&rel);
            fs::write(&path, bytes).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
            entries.push(ManifestEntry {
                image_path: rel,
                bbox: None,
                identity_label: label.clone(),
                descriptions: vec![caption.join(", ")],
                attributes,
            });
        }
    }
    Ok(DatasetManifest {
        mode: ManifestMode::Cropped,
        entries,
        base_dir: dir.to_owned(),
    })
}
