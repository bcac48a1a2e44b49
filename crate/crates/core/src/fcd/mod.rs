//! Description generation stage: image restoration contracts, prompt assembly,
//! contrastive token scoring and the slot-structured description format.
//!
//! The neural pieces (noise predictor, multimodal generator) are traits with
//! deterministic mock implementations so the pipeline runs offline.

mod decode;
mod description;
mod generator;
mod prompt;
mod restore;

use thiserror::Error;

pub use decode::{contrastive_decode, ContrastiveConfig, ScoredToken, TokenDistribution};
pub use description::{
    canonical_phrase, classify_phrase, head_noun, parse_query_text, parse_structured_description,
    Slot, SlotAttributes, StructuredDescription,
};
pub(crate) use description::content_words;
pub use generator::{DescriptionGenerator, DescriptionInput, NoisyGenerator, TemplateGenerator};
pub use prompt::{assemble_prompt, PromptSegment, PromptSequence, OBJECT_TEMPLATE, SYSTEM_TEMPLATE};
pub use restore::{
    ddim_step, reconstruct, run_denoise, AlphaSchedule, ConstantPredictor, FeatureMaps, FusionKernel,
    ImageField, NearestUpsampleKernel, NoisePredictor, ZeroPredictor, DEFAULT_DENOISE_STEPS,
    UPSAMPLE_FACTOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FcdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("singular schedule: alpha is zero at t={0}")]
    SingularSchedule(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("parse error: {0}")]
    Parse(String),
}
