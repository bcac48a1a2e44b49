use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AttributeBag, EmbeddingProvider, EmbeddingVector, EncoderError, ImageView};

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer; decorrelates the base seed from the token hash before
// they are combined.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adds the seeded unit vector for `token` into `acc`.
fn accumulate_token(acc: &mut [f64], token: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed) ^ fnv1a64(token.as_bytes()));
    let raw: Vec<f64> = (0..acc.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, r) in acc.iter_mut().zip(raw) {
        *a += r / norm;
    }
}

/// Deterministic bag embedding: the normalized sum of one seeded unit vector
/// per token. A pure function of `(bag, seed, dim)`.
pub fn mock_embed(bag: &AttributeBag, seed: u64, dim: usize) -> Result<EmbeddingVector, EncoderError> {
    if dim < 8 {
        return Err(EncoderError::InvalidDimension(dim));
    }
    if bag.is_empty() {
        return Err(EncoderError::DegenerateVector("empty attribute bag".into()));
    }
    let mut acc = vec![0.0f64; dim];
    for token in bag.iter() {
        accumulate_token(&mut acc, token, seed);
    }
    EmbeddingVector::from_f64_normalized(&acc)
}

/// Seeded mock encoder for both modalities.
///
/// Text and images share token vectors, so an image embeds close to the
/// phrases describing what is visible in it. `image_jitter` adds a per-image
/// random direction of that length (keyed by the image key) after
/// normalization, which separates views that show identical attributes.
#[derive(Debug, Clone)]
pub struct MockProvider {
    dim: usize,
    seed: u64,
    image_jitter: f64,
}

impl MockProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EncoderError> {
        if dim < 8 {
            return Err(EncoderError::InvalidDimension(dim));
        }
        Ok(Self {
            dim,
            seed,
            image_jitter: 0.0,
        })
    }

    pub fn with_image_jitter(mut self, jitter: f64) -> Self {
        self.image_jitter = jitter.max(0.0);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_phrases(&self, bag: &AttributeBag) -> Result<EmbeddingVector, EncoderError> {
        mock_embed(bag, self.seed, self.dim)
    }

    fn embed_image(&self, image: ImageView<'_>) -> Result<EmbeddingVector, EncoderError> {
        let clean = mock_embed(image.visible, self.seed, self.dim)?;
        if self.image_jitter == 0.0 {
            return Ok(clean);
        }
        let mut noise = vec![0.0f64; self.dim];
        accumulate_token(&mut noise, &format!("\u{0}image:{}", image.key), self.seed);
        let acc: Vec<f64> = clean
            .values()
            .iter()
            .zip(&noise)
            .map(|(&c, n)| c as f64 + self.image_jitter * n)
            .collect();
        EmbeddingVector::from_f64_normalized(&acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::cosine_sim;

    fn bag(tokens: &[&str]) -> AttributeBag {
        tokens.iter().copied().collect()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let b = bag(&["black hair", "blue shirt", "jeans"]);
        let x = mock_embed(&b, 7, 64).unwrap();
        let y = mock_embed(&b, 7, 64).unwrap();
        assert_eq!(x, y);
        assert!((x.norm() - 1.0).abs() < 1e-6);
        assert!((cosine_sim(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn seed_changes_output() {
        let b = bag(&["black hair"]);
        assert_ne!(mock_embed(&b, 1, 32).unwrap(), mock_embed(&b, 2, 32).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            mock_embed(&AttributeBag::new(), 0, 32),
            Err(EncoderError::DegenerateVector(_))
        ));
        assert!(matches!(
            mock_embed(&bag(&["x"]), 0, 4),
            Err(EncoderError::InvalidDimension(4))
        ));
        assert!(MockProvider::new(7, 0).is_err());
    }

    #[test]
    fn disjoint_bags_are_nearly_orthogonal() {
        // Empirical concentration over 1000 seeded draws: the largest observed
        // magnitude sits far below the 0.3 bound.
        let mut worst = 0.0f64;
        for seed in 0..1000u64 {
            let a = bag(&["a1", "a2", "a3"]);
            let b = bag(&["b1", "b2", "b3"]);
            let c = cosine_sim(&mock_embed(&a, seed, 256).unwrap(), &mock_embed(&b, seed, 256).unwrap()).unwrap();
            worst = worst.max(c.abs());
        }
        assert!(worst < 0.3, "worst |cos| = {worst}");
    }

    #[test]
    fn similarity_grows_with_overlap() {
        let q = bag(&["a", "b", "c", "d"]);
        let mut last = -1.0;
        for shared in 0..=4 {
            let mut tokens: Vec<String> = ["a", "b", "c", "d"][..shared].iter().map(|s| s.to_string()).collect();
            tokens.extend((shared..4).map(|i| format!("other{i}")));
            let c = cosine_sim(&mock_embed(&q, 3, 256).unwrap(), &mock_embed(&tokens.iter().collect(), 3, 256).unwrap()).unwrap();
            assert!(c > last);
            last = c;
        }
    }

    #[test]
    fn image_jitter_separates_identical_views() {
        let p = MockProvider::new(64, 5).unwrap().with_image_jitter(0.3);
        let visible = bag(&["black hair", "jeans"]);
        let a = p.embed_image(ImageView { key: "a", visible: &visible }).unwrap();
        let b = p.embed_image(ImageView { key: "b", visible: &visible }).unwrap();
        let c = cosine_sim(&a, &b).unwrap();
        assert!(c < 1.0 - 1e-3 && c > 0.7, "cos = {c}");
    }
}
