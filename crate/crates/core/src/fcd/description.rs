//! Slot-structured pedestrian descriptions.
//!
//! Wire syntax: `Head: black hair | Upper: blue shirt, white logo | Lower: jeans | Accessories: black backpack`.
//! Sections are separated by `|` or newlines; phrases inside a section by `,` or `;`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FcdError;
use crate::encoders::AttributeBag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Head,
    Upper,
    Lower,
    Accessories,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Head, Slot::Upper, Slot::Lower, Slot::Accessories];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Head => "head",
            Slot::Upper => "upper",
            Slot::Lower => "lower",
            Slot::Accessories => "accessories",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Slot::Head => "Head",
            Slot::Upper => "Upper",
            Slot::Lower => "Lower",
            Slot::Accessories => "Accessories",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_label(label: &str) -> Option<Slot> {
        let l: String = label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        match l.as_str() {
            "head" => Some(Slot::Head),
            "upper" | "upper body" => Some(Slot::Upper),
            "lower" | "lower body" => Some(Slot::Lower),
            "accessories" | "accessory" => Some(Slot::Accessories),
            _ => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Slot {
    type Err = FcdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Slot::from_label(s).ok_or_else(|| FcdError::Validation(format!("unknown slot {s:?}")))
    }
}

/// Per-slot attribute lists, as carried by manifests and generator inputs.
pub type SlotAttributes = BTreeMap<Slot, Vec<String>>;

const FILLER_WORDS: &[&str] = &[
    "a", "an", "the", "and", "with", "wearing", "wears", "carrying", "carries", "holding", "holds",
    "has", "having", "in", "is", "of", "on",
];

const HEAD_WORDS: &[&str] = &[
    "hair", "hat", "cap", "helmet", "hood", "glasses", "sunglasses", "beard", "mask", "headphones",
    "ponytail", "bald", "headband", "beanie", "earrings",
];
const UPPER_WORDS: &[&str] = &[
    "shirt", "t-shirt", "tshirt", "jacket", "coat", "sweater", "hoodie", "top", "blouse", "vest",
    "sweatshirt", "cardigan", "dress", "blazer", "jersey", "uniform", "sleeves", "scarf", "suit",
];
const LOWER_WORDS: &[&str] = &[
    "pants", "trousers", "jeans", "shorts", "skirt", "shoes", "sneakers", "boots", "sandals",
    "leggings", "heels", "socks", "slippers", "trainers",
];
const ACCESSORY_WORDS: &[&str] = &[
    "backpack", "bag", "handbag", "purse", "umbrella", "suitcase", "luggage", "phone", "bottle",
    "watch", "bicycle", "bike", "stroller", "box", "briefcase", "satchel", "tote", "belt", "cup",
];

/// Lowercases, collapses whitespace and drops delimiter characters so the
/// phrase survives a serialize/parse round trip.
fn normalize_phrase(raw: &str) -> String {
    raw.chars()
        .map(|c| if matches!(c, ',' | ';' | '|' | '\n' | '\r') { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Normalized phrase without leading filler words ("carrying a black backpack"
/// becomes "black backpack"). Used for graph keys and embedding tokens.
pub fn canonical_phrase(raw: &str) -> String {
    let norm = normalize_phrase(raw);
    let words: Vec<&str> = norm.split(' ').collect();
    let start = words.iter().position(|w| !FILLER_WORDS.contains(w)).unwrap_or(words.len());
    if start == words.len() {
        return norm;
    }
    words[start..].join(" ")
}

/// Last word of the canonical phrase.
pub fn head_noun(phrase: &str) -> String {
    canonical_phrase(phrase)
        .rsplit(' ')
        .next()
        .unwrap_or_default()
        .to_owned()
}

/// Non-filler words, with hyphenated compounds split ("red-and-black" gives
/// "red", "black").
pub(crate) fn content_words(phrase: &str) -> std::collections::BTreeSet<String> {
    normalize_phrase(phrase)
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty() && !FILLER_WORDS.contains(w))
        .map(str::to_owned)
        .collect()
}

/// Assigns a free-text phrase to a slot by its garment/object noun, scanning
/// from the last word backwards.
pub fn classify_phrase(phrase: &str) -> Option<Slot> {
    let norm = normalize_phrase(phrase);
    for word in norm.split(' ').rev() {
        let candidates = std::iter::once(word).chain(word.split('-').rev());
        for w in candidates {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-');
            let hit = [
                (HEAD_WORDS, Slot::Head),
                (UPPER_WORDS, Slot::Upper),
                (LOWER_WORDS, Slot::Lower),
                (ACCESSORY_WORDS, Slot::Accessories),
            ]
            .into_iter()
            .find(|(words, _)| words.contains(&w) || w.strip_suffix('s').is_some_and(|s| words.contains(&s)));
            if let Some((_, slot)) = hit {
                return Some(slot);
            }
        }
    }
    None
}

/// Four-slot attribute record plus the text it was parsed from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDescription {
    pub head: Vec<String>,
    pub upper: Vec<String>,
    pub lower: Vec<String>,
    pub accessories: Vec<String>,
    #[serde(default)]
    pub raw_text: String,
}

impl StructuredDescription {
    pub fn from_slots<'a, I>(slots: I) -> Self
    where
        I: IntoIterator<Item = (Slot, &'a str)>,
    {
        let mut d = Self::default();
        for (slot, phrase) in slots {
            d.push(slot, phrase);
        }
        d.raw_text = d.to_slot_text();
        d
    }

    pub fn from_attributes(attrs: &SlotAttributes) -> Self {
        Self::from_slots(
            attrs
                .iter()
                .flat_map(|(slot, phrases)| phrases.iter().map(move |p| (*slot, p.as_str()))),
        )
    }

    pub fn slot(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Head => &self.head,
            Slot::Upper => &self.upper,
            Slot::Lower => &self.lower,
            Slot::Accessories => &self.accessories,
        }
    }

    pub(crate) fn slot_mut(&mut self, slot: Slot) -> &mut Vec<String> {
        match slot {
            Slot::Head => &mut self.head,
            Slot::Upper => &mut self.upper,
            Slot::Lower => &mut self.lower,
            Slot::Accessories => &mut self.accessories,
        }
    }

    /// Appends a normalized phrase unless it is empty or already present.
    pub fn push(&mut self, slot: Slot, phrase: &str) -> bool {
        let p = normalize_phrase(phrase);
        if p.is_empty() || self.slot(slot).contains(&p) {
            return false;
        }
        self.slot_mut(slot).push(p);
        true
    }

    pub fn is_empty(&self) -> bool {
        Slot::ALL.iter().all(|s| self.slot(*s).is_empty())
    }

    pub fn phrases(&self) -> impl Iterator<Item = (Slot, &str)> {
        Slot::ALL
            .into_iter()
            .flat_map(move |s| self.slot(s).iter().map(move |p| (s, p.as_str())))
    }

    /// Canonical phrases of every slot.
    pub fn bag(&self) -> AttributeBag {
        self.phrases().map(|(_, p)| canonical_phrase(p)).collect()
    }

    pub fn slot_bag(&self, slot: Slot) -> AttributeBag {
        self.slot(slot).iter().map(|p| canonical_phrase(p)).collect()
    }

    pub fn to_slot_text(&self) -> String {
        Slot::ALL
            .iter()
            .map(|s| format!("{}: {}", s.label(), self.slot(*s).join(", ")))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

impl fmt::Display for StructuredDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_slot_text())
    }
}

/// Parses labelled slot syntax; returns the description and whether any
/// slot label was recognised.
fn parse_labelled(text: &str) -> (StructuredDescription, bool) {
    let mut d = StructuredDescription {
        raw_text: text.to_owned(),
        ..Default::default()
    };
    let mut recognised = false;
    for section in text.split(['|', '\n']) {
        let Some((label, content)) = section.split_once(':') else {
            continue;
        };
        let Some(slot) = Slot::from_label(label) else {
            continue;
        };
        recognised = true;
        for phrase in content.split([',', ';']) {
            d.push(slot, phrase);
        }
    }
    (d, recognised)
}

/// Parses generator output in the slot-delimited syntax.
pub fn parse_structured_description(text: &str) -> Result<StructuredDescription, FcdError> {
    let (d, recognised) = parse_labelled(text);
    if !recognised {
        return Err(FcdError::Parse("no recognizable slot label".into()));
    }
    if d.is_empty() {
        return Err(FcdError::Parse("all slots are empty".into()));
    }
    Ok(d)
}

/// Parses user query or feedback text: labelled slot syntax when present,
/// otherwise comma-separated phrases assigned to slots by their nouns.
/// Phrases that name no known garment or object are dropped.
pub fn parse_query_text(text: &str) -> Result<StructuredDescription, FcdError> {
    let (d, recognised) = parse_labelled(text);
    if recognised {
        if d.is_empty() {
            return Err(FcdError::Parse("all slots are empty".into()));
        }
        return Ok(d);
    }
    let mut d = StructuredDescription {
        raw_text: text.to_owned(),
        ..Default::default()
    };
    for phrase in text.split([',', ';', '.', '\n']) {
        if let Some(slot) = classify_phrase(phrase) {
            d.push(slot, phrase);
        }
    }
    if d.is_empty() {
        return Err(FcdError::Parse(format!("no attribute phrase recognised in {text:?}")));
    }
    Ok(d)
}
