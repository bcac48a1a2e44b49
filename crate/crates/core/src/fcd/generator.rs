use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FcdError, PromptSequence, Slot, SlotAttributes, StructuredDescription};
use crate::encoders::fnv1a64;

/// What a description generator receives for one image.
#[derive(Debug, Clone, Copy)]
pub struct DescriptionInput<'a> {
    pub image_key: &'a str,
    /// Attributes visible in the (restored) image; mocks read these in place
    /// of pixels.
    pub visible: &'a SlotAttributes,
    pub prompt: &'a PromptSequence,
}

/// Produces slot-delimited description text for an image.
pub trait DescriptionGenerator: Send + Sync {
    fn describe(&self, input: DescriptionInput<'_>) -> Result<String, FcdError>;
}

/// Renders the visible attributes verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator;

impl DescriptionGenerator for TemplateGenerator {
    fn describe(&self, input: DescriptionInput<'_>) -> Result<String, FcdError> {
        let d = StructuredDescription::from_attributes(input.visible);
        if d.is_empty() {
            return Err(FcdError::Validation(format!("image {} has no visible attributes", input.image_key)));
        }
        Ok(d.to_slot_text())
    }
}

/// Template generator with seeded omissions and hallucinations, used to give
/// probe-based hallucination metrics something to measure.
#[derive(Debug, Clone)]
pub struct NoisyGenerator {
    pub drop_prob: f64,
    pub hallucination_prob: f64,
    /// Per-slot pool hallucinated attributes are drawn from.
    pub vocabulary: SlotAttributes,
    pub seed: u64,
}

impl DescriptionGenerator for NoisyGenerator {
    fn describe(&self, input: DescriptionInput<'_>) -> Result<String, FcdError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(input.image_key.as_bytes()));
        let mut d = StructuredDescription::default();
        for slot in Slot::ALL {
            let visible = input.visible.get(&slot).map(Vec::as_slice).unwrap_or_default();
            for p in visible {
                if !rng.random_bool(self.drop_prob.clamp(0.0, 1.0)) {
                    d.push(slot, p);
                }
            }
            let pool = self.vocabulary.get(&slot).map(Vec::as_slice).unwrap_or_default();
            if !pool.is_empty() && rng.random_bool(self.hallucination_prob.clamp(0.0, 1.0)) {
                d.push(slot, &pool[rng.random_range(0..pool.len())]);
            }
        }
        if d.is_empty() {
            // keep the output parseable
            if let Some((slot, p)) = input.visible.iter().find_map(|(s, v)| v.first().map(|p| (*s, p))) {
                d.push(slot, p);
            } else {
                return Err(FcdError::Validation(format!("image {} has no visible attributes", input.image_key)));
            }
        }
        Ok(d.to_slot_text())
    }
}
