//! Embedding providers and the cosine kernel shared by the graph and the ranker.
//!
//! Two reference providers ship with the crate:
//!
//! - [`MockProvider`]: a deterministic, seeded stand-in for the visual and text
//!   encoders. Every attribute token maps to a pseudo-random unit vector and a
//!   bag of tokens embeds to the normalized sum, so cosine similarity grows with
//!   attribute overlap.
//! - [`StoreProvider`]: serves precomputed vectors from an [`EmbeddingStore`]
//!   file (the `FPEM` binary format).
//!
//! Vectors are stored as `f32`; every reduction accumulates in `f64`.

mod mock;
mod store;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{fnv1a64, mock_embed, MockProvider};
pub use store::{EmbeddingStore, StoreProvider, STORE_MAGIC, STORE_VERSION};

/// Default embedding width when a configuration does not set one.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("invalid embedding dimension {0}")]
    InvalidDimension(usize),
    #[error("embedding store format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EncoderError {
    fn from(e: std::io::Error) -> Self {
        EncoderError::Io(e.to_string())
    }
}

/// Dense float embedding. Values are finite; `dim` is the vector length.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbeddingVector(dim={}, norm={:.6})", self.dim(), self.norm())
    }
}

impl EmbeddingVector {
    /// Wraps raw values without normalizing them.
    pub fn new(values: Vec<f32>) -> Result<Self, EncoderError> {
        if values.is_empty() {
            return Err(EncoderError::InvalidDimension(0));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::DegenerateVector("non-finite component".into()));
        }
        Ok(Self { values })
    }

    /// Builds a unit-norm vector from `values`.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EncoderError> {
        let acc: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Self::from_f64_normalized(&acc)
    }

    /// Normalizes an `f64` accumulator and rounds it to `f32` storage.
    pub fn from_f64_normalized(acc: &[f64]) -> Result<Self, EncoderError> {
        if acc.is_empty() {
            return Err(EncoderError::InvalidDimension(0));
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(EncoderError::DegenerateVector("non-finite component".into()));
        }
        if norm == 0.0 {
            return Err(EncoderError::DegenerateVector("zero vector".into()));
        }
        Ok(Self {
            values: acc.iter().map(|v| (v / norm) as f32).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, c: f32) -> Result<Self, EncoderError> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }

    /// Normalized sum of several vectors of one width.
    pub fn mean_direction<'a, I>(vectors: I) -> Result<Self, EncoderError>
    where
        I: IntoIterator<Item = &'a EmbeddingVector>,
    {
        let mut acc: Option<Vec<f64>> = None;
        for v in vectors {
            let acc = acc.get_or_insert_with(|| vec![0.0; v.dim()]);
            if acc.len() != v.dim() {
                return Err(EncoderError::Dimension {
                    expected: acc.len(),
                    actual: v.dim(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(&v.values) {
                *a += x as f64;
            }
        }
        match acc {
            Some(acc) => Self::from_f64_normalized(&acc),
            None => Err(EncoderError::DegenerateVector("no vectors to combine".into())),
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// The result is exactly symmetric: the dot product is a sum of commuting
/// products and the norms are computed independently of argument order.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EncoderError> {
    if a.dim() != b.dim() {
        return Err(EncoderError::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::DegenerateVector("zero vector in cosine".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Set of lowercase attribute tokens. Iteration order is lexicographic, which
/// keeps every embedding that sums over a bag reproducible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeBag {
    tokens: BTreeSet<String>,
}

impl AttributeBag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a token after trimming and lowercasing it. Empty tokens are
    /// ignored; returns whether the bag grew.
    pub fn insert(&mut self, token: &str) -> bool {
        let t = token.trim().to_lowercase();
        if t.is_empty() {
            return false;
        }
        self.tokens.insert(t)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(&token.trim().to_lowercase())
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

impl<S: AsRef<str>> FromIterator<S> for AttributeBag {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut bag = AttributeBag::new();
        for t in iter {
            bag.insert(t.as_ref());
        }
        bag
    }
}

/// What an image encoder is allowed to see about one gallery image.
///
/// `visible` stands in for pixel content: the mock provider embeds it, the
/// store provider ignores it and looks the image up by key.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub key: &'a str,
    pub visible: &'a AttributeBag,
}

/// Source of text and image embeddings living in one shared space.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds a set of attribute phrases.
    fn embed_phrases(&self, bag: &AttributeBag) -> Result<EmbeddingVector, EncoderError>;

    fn embed_image(&self, image: ImageView<'_>) -> Result<EmbeddingVector, EncoderError>;
}
