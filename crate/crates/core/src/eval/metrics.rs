use super::EvalError;

/// Percentage of queries whose first correct hit is ranked within `k`.
pub fn rank_k(first_hit_ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if first_hit_ranks.is_empty() {
        return Err(EvalError::Validation("rank-k over no queries".into()));
    }
    if first_hit_ranks.contains(&0) {
        return Err(EvalError::Validation("ranks start at 1".into()));
    }
    let hits = first_hit_ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / first_hit_ranks.len() as f64)
}

/// Mean of precision@i over the positions `i` of relevant items, in [0, 1].
pub fn average_precision(relevance: &[bool]) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::Validation("query has no relevant item".into()));
    }
    Ok(sum / hits as f64)
}

/// Mean average precision as a percentage.
pub fn mean_ap(rankings: &[Vec<bool>]) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::Validation("mAP over no queries".into()));
    }
    let mut total = 0.0;
    for r in rankings {
        total += average_precision(r)?;
    }
    Ok(100.0 * total / rankings.len() as f64)
}
