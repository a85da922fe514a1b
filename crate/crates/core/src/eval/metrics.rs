//! Ranking quality metrics: nDCG@k, Recall@k, MRR.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

fn assert_no_duplicates<Id: Eq + Hash>(ranking: &[Id]) {
    let mut seen = HashSet::with_capacity(ranking.len());
    for (i, id) in ranking.iter().enumerate() {
        assert!(seen.insert(id), "duplicate id at rank {} in ranking", i + 1);
    }
}

/// Normalized discounted cumulative gain over the top `k` of `ranking`.
///
/// DCG discounts each relevant document's gain by `log2(rank + 1)` (ranks
/// are 1-based); the ideal DCG places the highest gains first. Returns 0
/// when no relevant documents exist.
pub fn ndcg_at_k<Id: Eq + Hash>(ranking: &[Id], gains: &HashMap<Id, f64>, k: usize) -> f64 {
    assert!(k >= 1, "ndcg_at_k requires k >= 1");
    assert_no_duplicates(ranking);
    if gains.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter_map(|(i, id)| gains.get(id).map(|g| g / ((i + 2) as f64).log2()))
        .sum();

    let mut ideal: Vec<f64> = gains.values().copied().collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Fraction of relevant documents retrieved within the top `k`.
pub fn recall_at_k<Id: Eq + Hash>(ranking: &[Id], relevant: &HashSet<Id>, k: usize) -> f64 {
    assert!(k >= 1, "recall_at_k requires k >= 1");
    assert_no_duplicates(ranking);
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id)).count();
    hits as f64 / relevant.len() as f64
}

/// Reciprocal rank of the first relevant document (0 if none retrieved).
pub fn mrr<Id: Eq + Hash>(ranking: &[Id], relevant: &HashSet<Id>) -> f64 {
    assert_no_duplicates(ranking);
    ranking
        .iter()
        .position(|id| relevant.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}
