//! Contrastive token scoring.
//!
//! Candidates are the tokens whose structure-guided probability reaches
//! `beta * max(p_struct)`; each is scored `ln p_struct(y) - lambda * ln p_plain(y)`
//! and returned best-first.

use super::FcdError;

const SUM_TOLERANCE: f64 = 1e-6;

/// Probability distribution over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, FcdError> {
        if probs.is_empty() {
            return Err(FcdError::Validation("empty vocabulary".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(FcdError::Validation("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(FcdError::Validation(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self, FcdError> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(FcdError::Validation("weights must have a positive finite sum".into()));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { lambda: 0.1, beta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub token: usize,
    pub score: f64,
}

/// Ranks plausible tokens by contrastive score. Ties keep ascending token order.
///
/// A candidate the plain distribution gives zero mass scores `+inf` when
/// `lambda > 0`.
pub fn contrastive_decode(
    p_struct: &TokenDistribution,
    p_plain: &TokenDistribution,
    lambda: f64,
    beta: f64,
) -> Result<Vec<ScoredToken>, FcdError> {
    if p_struct.vocab_size() != p_plain.vocab_size() {
        return Err(FcdError::Dimension(p_struct.vocab_size(), p_plain.vocab_size()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FcdError::Validation(format!("lambda {lambda} outside [0, 1]")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(FcdError::Validation(format!("beta {beta} outside (0, 1]")));
    }
    let max = p_struct.probs.iter().copied().fold(0.0f64, f64::max);
    let cutoff = beta * max;
    let mut ranked: Vec<ScoredToken> = p_struct
        .probs
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p >= cutoff && p > 0.0)
        .map(|(token, &p)| {
            let penalty = if lambda == 0.0 { 0.0 } else { lambda * p_plain.probs[token].ln() };
            ScoredToken {
                token,
                score: p.ln() - penalty,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    fn order(r: &[ScoredToken]) -> Vec<usize> {
        r.iter().map(|s| s.token).collect()
    }

    #[test]
    fn three_token_oracle() {
        // ln .6 - .5 ln .5 = -0.16425, ln .3 - .5 ln .1 = -0.05268, ln .1 - .5 ln .4 = -1.84444
        let r = contrastive_decode(&dist(&[0.6, 0.3, 0.1]), &dist(&[0.5, 0.1, 0.4]), 0.5, 0.1).unwrap();
        assert_eq!(order(&r), vec![1, 0, 2]);
        let expect = [
            0.3f64.ln() - 0.5 * 0.1f64.ln(),
            0.6f64.ln() - 0.5 * 0.5f64.ln(),
            0.1f64.ln() - 0.5 * 0.4f64.ln(),
        ];
        for (s, e) in r.iter().zip(expect) {
            assert!((s.score - e).abs() < 1e-12);
        }
        assert!((r[0].score - (-0.052_680_257_828_913_7)).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_keeps_struct_argmax() {
        let r = contrastive_decode(&dist(&[0.2, 0.5, 0.3]), &dist(&[0.0, 0.9, 0.1]), 0.0, 0.1).unwrap();
        assert_eq!(r[0].token, 1);
        assert!(r.iter().all(|s| s.score.is_finite()));
    }

    #[test]
    fn plausibility_cutoff_prunes() {
        let r = contrastive_decode(&dist(&[0.9, 0.08, 0.02]), &dist(&[0.98, 0.01, 0.01]), 1.0, 0.1).unwrap();
        assert_eq!(order(&r), vec![0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            contrastive_decode(&dist(&[0.5, 0.5]), &dist(&[1.0]), 0.1, 0.1),
            Err(FcdError::Dimension(2, 1))
        ));
        assert!(contrastive_decode(&dist(&[1.0]), &dist(&[1.0]), 1.5, 0.1).is_err());
        assert!(contrastive_decode(&dist(&[1.0]), &dist(&[1.0]), 0.5, 0.0).is_err());
        assert!(TokenDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::new(vec![-0.1, 1.1]).is_err());
    }

    fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n)
    }

    proptest! {
        #[test]
        fn identical_distributions_rank_like_p(w in weights(8), lambda in 0.0f64..0.99) {
            let p = TokenDistribution::from_weights(&w).unwrap();
            let r = contrastive_decode(&p, &p, lambda, 0.05).unwrap();
            for pair in r.windows(2) {
                prop_assert!(p.prob(pair[0].token) >= p.prob(pair[1].token));
            }
        }

        #[test]
        fn ranking_survives_scaling_plain_then_renormalizing(
            ws in weights(6), wp in weights(6), c in 0.1f64..10.0, lambda in 0.0f64..=1.0,
        ) {
            let ps = TokenDistribution::from_weights(&ws).unwrap();
            let pp = TokenDistribution::from_weights(&wp).unwrap();
            let scaled: Vec<f64> = pp.probs().iter().map(|p| p * c).collect();
            let pp2 = TokenDistribution::from_weights(&scaled).unwrap();
            let a = contrastive_decode(&ps, &pp, lambda, 0.1).unwrap();
            let b = contrastive_decode(&ps, &pp2, lambda, 0.1).unwrap();
            prop_assert_eq!(order(&a), order(&b));
        }
    }
}
