//! Batch assembly: per-query candidate sets from positives, hard
//! negatives, and the in-batch pool.

use thiserror::Error;

use super::{Dataset, TrainingExample};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("example {index} has {available} hard negatives, batch requires {requested}")]
    NotEnoughHardNegatives { index: usize, available: usize, requested: usize },
    #[error("dataset exhausted while resampling duplicate positives")]
    ResampleExhausted,
}

/// One assembled training batch. The document list pools every query's
/// positive and hard negatives (deduplicated by content); each query keeps
/// the index of its positive.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    /// Deduplicated candidate documents shared by all queries.
    pub docs: Vec<Vec<u32>>,
    /// Per-query index of its positive in `docs`.
    pub positive: Vec<usize>,
    /// (query slot, replacement dataset index) for resampled duplicates.
    pub resampled: Vec<(usize, usize)>,
}

/// Assemble a batch from dataset rows `indices`.
///
/// Two queries sharing identical positive content would make each the
/// other's false negative, so the later one is replaced by the next unused
/// dataset example with a fresh positive (logged and recorded in
/// `resampled`).
pub fn make_batch(
    dataset: &Dataset,
    indices: &[usize],
    hard_negs_per_query: usize,
) -> Result<Batch, BatchError> {
    assert!(!indices.is_empty(), "make_batch requires at least one example index");
    let mut distinct = indices.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), indices.len(), "make_batch indices must be distinct");
    for &i in indices {
        assert!(i < dataset.examples.len(), "index {i} out of range for {} examples", dataset.examples.len());
    }

    let mut chosen = indices.to_vec();
    let mut resampled = Vec::new();
    let mut seen_positive: std::collections::HashSet<&[u32]> = Default::default();
    let mut in_use: std::collections::HashSet<usize> = chosen.iter().copied().collect();
    for slot in 0..chosen.len() {
        loop {
            let ex = &dataset.examples[chosen[slot]];
            if seen_positive.insert(ex.positive.as_slice()) {
                break;
            }
            // Duplicate positive: walk the dataset for a replacement.
            let replacement = (0..dataset.examples.len())
                .find(|i| {
                    !in_use.contains(i)
                        && !seen_positive.contains(dataset.examples[*i].positive.as_slice())
                })
                .ok_or(BatchError::ResampleExhausted)?;
            log::warn!(
                "batch slot {slot}: duplicate positive content, resampling dataset index {} -> {replacement}",
                chosen[slot]
            );
            in_use.remove(&chosen[slot]);
            in_use.insert(replacement);
            resampled.push((slot, replacement));
            chosen[slot] = replacement;
        }
    }

    let examples: Vec<TrainingExample> =
        chosen.iter().map(|&i| dataset.examples[i].clone()).collect();

    for (index, ex) in examples.iter().enumerate() {
        if ex.hard_negatives.len() < hard_negs_per_query {
            return Err(BatchError::NotEnoughHardNegatives {
                index,
                available: ex.hard_negatives.len(),
                requested: hard_negs_per_query,
            });
        }
    }

    let mut docs: Vec<Vec<u32>> = Vec::new();
    let mut index_of: std::collections::HashMap<Vec<u32>, usize> = Default::default();
    let mut intern = |docs: &mut Vec<Vec<u32>>, tokens: &Vec<u32>| -> usize {
        if let Some(&i) = index_of.get(tokens) {
            return i;
        }
        docs.push(tokens.clone());
        index_of.insert(tokens.clone(), docs.len() - 1);
        docs.len() - 1
    };

    let mut positive = Vec::with_capacity(examples.len());
    for ex in &examples {
        positive.push(intern(&mut docs, &ex.positive));
        for hn in ex.hard_negatives.iter().take(hard_negs_per_query) {
            intern(&mut docs, hn);
        }
    }

    Ok(Batch { examples, docs, positive, resampled })
}
