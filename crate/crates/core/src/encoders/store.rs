//! `FPEM` binary embedding store.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "FPEM" | u32 version (=1) | u32 dim | u64 count
//! count × ( u16 keylen | key bytes (UTF-8) | dim × f32 )
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AttributeBag, EmbeddingProvider, EmbeddingVector, EncoderError, ImageView};

pub const STORE_MAGIC: [u8; 4] = *b"FPEM";
pub const STORE_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// In-memory embedding store keyed by UTF-8 strings. Records are written in
/// key order, so equal stores serialize to equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, EncoderError> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(EncoderError::InvalidDimension(dim));
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces a record.
    pub fn insert(&mut self, key: impl Into<String>, v: EmbeddingVector) -> Result<(), EncoderError> {
        let key = key.into();
        if key.len() > u16::MAX as usize {
            return Err(EncoderError::Format(format!("key longer than {} bytes", u16::MAX)));
        }
        if v.dim() != self.dim {
            return Err(EncoderError::Dimension {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        self.entries.insert(key, v);
        Ok(())
    }

    /// Stored vector for `key`; `None` when absent.
    pub fn lookup(&self, key: &str) -> Option<&EmbeddingVector> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, v) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(EncoderError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(EncoderError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(EncoderError::Format("dim is zero".into()));
        }
        let count = r.u64()?;
        let mut store = EmbeddingStore::new(dim)?;
        for i in 0..count {
            let keylen = r.u16()? as usize;
            let key = std::str::from_utf8(r.take(keylen)?)
                .map_err(|_| EncoderError::Format(format!("record {i}: key is not UTF-8")))?
                .to_owned();
            let raw = r.take(4 * dim)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let v = EmbeddingVector::new(values)
                .map_err(|e| EncoderError::Format(format!("record {i}: {e}")))?;
            if store.entries.insert(key, v).is_some() {
                return Err(EncoderError::Format(format!("record {i}: duplicate key")));
            }
        }
        if r.pos != bytes.len() {
            return Err(EncoderError::Format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| EncoderError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EncoderError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Serves precomputed embeddings.
///
/// Phrases are looked up under `phrase/<token>` and a bag embeds to the
/// normalized sum of the tokens it finds; images are looked up under
/// `image/<key>`.
#[derive(Debug, Clone)]
pub struct StoreProvider {
    store: EmbeddingStore,
}

impl StoreProvider {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }

    pub fn phrase_key(token: &str) -> String {
        format!("phrase/{token}")
    }

    pub fn image_key(key: &str) -> String {
        format!("image/{key}")
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl EmbeddingProvider for StoreProvider {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn embed_phrases(&self, bag: &AttributeBag) -> Result<EmbeddingVector, EncoderError> {
        let found: Vec<&EmbeddingVector> = bag
            .iter()
            .filter_map(|t| self.store.lookup(&Self::phrase_key(t)))
            .collect();
        if found.is_empty() {
            return Err(EncoderError::DegenerateVector(
                "no phrase of the bag is present in the store".into(),
            ));
        }
        EmbeddingVector::mean_direction(found)
    }

    fn embed_image(&self, image: ImageView<'_>) -> Result<EmbeddingVector, EncoderError> {
        self.store
            .lookup(&Self::image_key(image.key))
            .cloned()
            .ok_or_else(|| EncoderError::DegenerateVector(format!("image {} not in store", image.key)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_of(xs: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn single_record_round_trip() {
        let mut s = EmbeddingStore::new(3).unwrap();
        let v = vec_of(&[0.5, -1.0, 2.0]);
        s.insert("img_001", v.clone()).unwrap();
        let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.lookup("img_001"), Some(&v));
        assert_eq!(back.lookup("absent"), None);
    }

    #[test]
    fn header_layout_is_exact() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("k", vec_of(&[1.0, 2.0])).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"FPEM");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..22], &1u16.to_le_bytes());
        assert_eq!(b[22], b'k');
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn hundred_random_records_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = EmbeddingStore::new(17).unwrap();
        for i in 0..100 {
            let values: Vec<f32> = (0..17).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            s.insert(format!("rec_{i:03}_é"), vec_of(&values)).unwrap();
        }
        let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
        for key in s.keys() {
            let a: Vec<u32> = s.lookup(key).unwrap().values().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.lookup(key).unwrap().values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.len(), 100);
    }

    #[test]
    fn format_errors() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("key", vec_of(&[1.0, 2.0])).unwrap();
        let good = s.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad_magic), Err(EncoderError::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&bad_version), Err(EncoderError::Format(_))));

        for cut in [3, 19, 21, good.len() - 1] {
            assert!(matches!(EmbeddingStore::from_bytes(&good[..cut]), Err(EncoderError::Format(_))));
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&trailing), Err(EncoderError::Format(_))));
    }

    #[test]
    fn provider_sums_known_phrases() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert(StoreProvider::phrase_key("a"), vec_of(&[1.0, 0.0])).unwrap();
        s.insert(StoreProvider::phrase_key("b"), vec_of(&[0.0, 1.0])).unwrap();
        s.insert(StoreProvider::image_key("img"), vec_of(&[0.6, 0.8])).unwrap();
        let p = StoreProvider::new(s);
        let bag: AttributeBag = ["a", "b", "zzz"].into_iter().collect();
        let e = p.embed_phrases(&bag).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((e.values()[0] - h).abs() < 1e-6 && (e.values()[1] - h).abs() < 1e-6);
        let empty = AttributeBag::new();
        assert_eq!(p.embed_image(ImageView { key: "img", visible: &empty }).unwrap().values(), &[0.6, 0.8]);
        assert!(p.embed_phrases(&["zzz"].into_iter().collect()).is_err());
    }
}
