//! Retrieval evaluation and latency benchmarking.

mod latency;
mod metrics;

pub use latency::{bench_latency, rewrite_then_encode, LatencyConfig, LatencyError, LatencyReport, ModeTiming};
pub use metrics::{mrr, ndcg_at_k, recall_at_k};

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::backbone::Backbone;
use crate::data::{Corpus, Dataset};
use crate::encoder::{
    encode_corpus, encode_explicit, encode_latent, encode_plain, EncodeError, EncodeMode,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("eval set is empty")]
    EmptyEvalSet,
    #[error("query {query_index}: positive document not found in the corpus")]
    GoldMissing { query_index: usize },
    #[error("corpus embedding count {embs} does not match corpus size {docs}")]
    CorpusMismatch { embs: usize, docs: usize },
}

/// Ranking outcome for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_index: usize,
    pub gold_doc_id: String,
    /// 1-based rank of the gold document.
    pub gold_rank: usize,
    /// Top of the ranking as (doc_id, cosine score).
    pub top: Vec<(String, f32)>,
}

/// Aggregated retrieval metrics for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EncodeMode,
    pub doc_mode: EncodeMode,
    pub n_queries: usize,
    pub ndcg_at_10: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub per_query: Vec<QueryRanking>,
    /// Queries skipped because the encoder rejected them, by index.
    pub skipped: Vec<usize>,
}

/// Score one query embedding against the corpus; returns doc indices
/// sorted by descending cosine with ties broken by ascending doc id.
pub fn rank_against_corpus(
    query_emb: &[f32],
    corpus_embs: &[Vec<f32>],
    doc_ids: &[String],
) -> Vec<(usize, f32)> {
    let mut scored: Vec<(usize, f32)> = corpus_embs
        .iter()
        .enumerate()
        .map(|(i, d)| (i, query_emb.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f32>()))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| doc_ids[a.0].cmp(&doc_ids[b.0]))
    });
    scored
}

/// Evaluate a model over an eval split against a corpus.
///
/// The corpus is encoded once under `doc_mode`; queries are encoded under
/// `query_mode` (explicit mode feeds each example's gold rationale).
/// Rankings are by cosine with ties broken by ascending doc id; relevance
/// is binary with exactly the example's positive document relevant.
pub fn evaluate(
    backbone: &Backbone<f32>,
    eval_set: &Dataset,
    corpus: &Corpus,
    query_mode: EncodeMode,
    doc_mode: EncodeMode,
) -> Result<EvalResult, EvalError> {
    let docs: Vec<Vec<u32>> = corpus.docs.iter().map(|d| d.tokens.clone()).collect();
    let corpus_embs = encode_corpus(backbone, &docs, doc_mode)?;
    evaluate_with_embeddings(backbone, eval_set, corpus, &corpus_embs, query_mode, doc_mode)
}

/// [`evaluate`] with precomputed corpus embeddings, so K-sweeps at
/// inference can share one corpus encoding.
pub fn evaluate_with_embeddings(
    backbone: &Backbone<f32>,
    eval_set: &Dataset,
    corpus: &Corpus,
    corpus_embs: &[Vec<f32>],
    query_mode: EncodeMode,
    doc_mode: EncodeMode,
) -> Result<EvalResult, EvalError> {
    if eval_set.examples.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    if corpus_embs.len() != corpus.docs.len() {
        return Err(EvalError::CorpusMismatch { embs: corpus_embs.len(), docs: corpus.docs.len() });
    }
    let content_index = corpus.content_index();
    let doc_ids: Vec<String> = corpus.docs.iter().map(|d| d.doc_id.clone()).collect();
    let id_to_index: HashMap<&str, usize> =
        doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    // Gold document per query, resolved by positive content.
    let mut golds = Vec::with_capacity(eval_set.examples.len());
    for (query_index, ex) in eval_set.examples.iter().enumerate() {
        let id = content_index
            .get(ex.positive.as_slice())
            .ok_or(EvalError::GoldMissing { query_index })?;
        golds.push(id_to_index[id]);
    }

    // Encode queries (parallel; order-preserving and deterministic).
    let encoded: Vec<Result<Vec<f32>, EncodeError>> = eval_set
        .examples
        .par_iter()
        .map(|ex| {
            let g = Graph::new();
            let bb = backbone.bind(&g, false);
            match query_mode {
                EncodeMode::Plain => encode_plain(&bb, &ex.query).map(|v| v.values()),
                EncodeMode::Latent { k } => encode_latent(&bb, &ex.query, k).map(|e| e.v.values()),
                EncodeMode::Explicit => {
                    encode_explicit(&bb, &ex.query, &ex.segments).map(|e| e.v_star.values())
                }
            }
        })
        .collect();

    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    let mut sums = [0.0f64; 5];
    for (query_index, emb) in encoded.into_iter().enumerate() {
        let emb = match emb {
            Ok(e) => e,
            Err(e) => {
                log::warn!("query {query_index} skipped: {e}");
                skipped.push(query_index);
                continue;
            }
        };
        let ranked = rank_against_corpus(&emb, corpus_embs, &doc_ids);
        let order: Vec<usize> = ranked.iter().map(|(i, _)| *i).collect();
        let gold = golds[query_index];
        let gold_rank = order.iter().position(|&i| i == gold).expect("gold doc is in the corpus") + 1;

        let gains: HashMap<usize, f64> = HashMap::from([(gold, 1.0)]);
        let relevant: HashSet<usize> = HashSet::from([gold]);
        sums[0] += ndcg_at_k(&order, &gains, 10);
        sums[1] += recall_at_k(&order, &relevant, 1);
        sums[2] += recall_at_k(&order, &relevant, 5);
        sums[3] += recall_at_k(&order, &relevant, 10);
        sums[4] += mrr(&order, &relevant);

        per_query.push(QueryRanking {
            query_index,
            gold_doc_id: doc_ids[gold].clone(),
            gold_rank,
            top: ranked.iter().take(10).map(|&(i, s)| (doc_ids[i].clone(), s)).collect(),
        });
    }

    let n = per_query.len();
    if n == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    let n_f = n as f64;
    Ok(EvalResult {
        mode: query_mode,
        doc_mode,
        n_queries: n,
        ndcg_at_10: sums[0] / n_f,
        recall_at_1: sums[1] / n_f,
        recall_at_5: sums[2] / n_f,
        recall_at_10: sums[3] / n_f,
        mrr: sums[4] / n_f,
        per_query,
        skipped,
    })
}

#[cfg(test)]
mod tests;
