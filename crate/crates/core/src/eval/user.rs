use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fcd::{canonical_phrase, Slot, SlotAttributes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("scripted user has no unrevealed attribute left")]
pub struct UserExhausted;

/// Picks one true attribute not yet in `revealed`, marks it revealed and
/// renders it as labelled feedback text (`"Upper: red jacket"`). The choice
/// depends only on `seed` and the set of unrevealed attributes.
pub fn scripted_user(truth: &SlotAttributes, revealed: &mut BTreeSet<(Slot, String)>, seed: u64) -> Result<String, UserExhausted> {
    let pending: Vec<(Slot, String)> = truth
        .iter()
        .flat_map(|(s, v)| v.iter().map(move |p| (*s, canonical_phrase(p))))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|x| !revealed.contains(x))
        .collect();
    if pending.is_empty() {
        return Err(UserExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (revealed.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let pick = pending[rng.random_range(0..pending.len())].clone();
    let text = format!("{}: {}", pick.0.label(), pick.1);
    revealed.insert(pick);
    Ok(text)
}
