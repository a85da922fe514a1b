//! The three encoding pathways over a shared backbone.
//!
//! - **plain**: one forward pass over `[INSTR; tokens; EOS]`, embedding taken
//!   at the EOS position. The baseline dense-retriever path.
//! - **latent**: forward over `[INSTR; tokens]` followed by K autoregressive
//!   soft thinking tokens; the final vector mean-pools the K latent hidden
//!   states. The only pathway used at inference.
//! - **explicit**: one forward pass over the query concatenated with its
//!   reasoning segments and EOS; exposes per-segment hidden states. The
//!   teacher pathway, training only.
//!
//! Every exit vector is L2-normalized, so downstream dot products are
//! cosines.

mod embfile;
pub use embfile::{read_embeddings, write_embeddings, EmbFileError, EMB_MAGIC};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{concat_rows, Graph, Scalar, Tensor};
use crate::backbone::{Backbone, BoundBackbone, EOS, INSTR};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("sequence of {len} tokens plus {extra} latent/control positions exceeds max_seq_len {max}")]
    Overflow { len: usize, extra: usize, max: usize },
    #[error("explicit input of {len} tokens exceeds max_explicit_len {max}")]
    ExplicitOverflow { len: usize, max: usize },
    #[error("latent encoding requires K >= 1 (use the plain mode for K = 0)")]
    ZeroThinkingSteps,
    #[error("rationale must contain at least one segment")]
    EmptyRationale,
    #[error("rationale segment {index} is empty")]
    EmptySegment { index: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("document {index}: {source}")]
    Doc {
        index: usize,
        #[source]
        source: Box<EncodeError>,
    },
    #[error("corpus encoding supports plain and latent modes only")]
    UnsupportedCorpusMode,
}

/// Which pathway encodes a piece of text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodeMode {
    Plain,
    Latent { k: usize },
    /// Requires gold rationale segments; queries only.
    Explicit,
}

/// Latent-view output: final vector plus the latent trajectory.
pub struct LatentEncoding<S: Scalar> {
    /// Unit vector `[1 x m]`: normalized mean of the trajectory.
    pub v: Tensor<S>,
    /// K latent hidden states, each `[1 x m]`.
    pub trajectory: Vec<Tensor<S>>,
    /// K soft thinking tokens, each `[1 x m]`.
    pub soft_tokens: Vec<Tensor<S>>,
    pub k: usize,
}

/// Explicit-view output: final vector plus per-segment states.
pub struct ExplicitEncoding<S: Scalar> {
    /// Unit vector `[1 x m]`: normalized hidden state at EOS.
    pub v_star: Tensor<S>,
    /// `[M x m]`: hidden state at the last token of each segment.
    pub segment_states: Tensor<S>,
    pub m: usize,
}

fn check_tokens<S: Scalar>(bb: &BoundBackbone<S>, ids: &[u32]) -> Result<(), EncodeError> {
    let vocab = bb.config().vocab_size;
    for &id in ids {
        if id as usize >= vocab {
            return Err(EncodeError::BadToken { id, vocab });
        }
    }
    Ok(())
}

/// Expected embedding under the softmax of `logits`: `softmax(l/T)^T . E`.
///
/// Fully differentiable through both the logits and the embedding matrix;
/// the output is a convex combination of embedding rows, so each coordinate
/// lies between the column-min and column-max of E.
pub fn soft_token<S: Scalar>(logits: &Tensor<S>, embedding: &Tensor<S>, temperature: S) -> Tensor<S> {
    assert!(temperature > S::ZERO, "soft_token requires temperature > 0");
    assert_eq!(logits.rows(), 1, "soft_token takes a single logit row");
    assert_eq!(
        logits.cols(),
        embedding.rows(),
        "soft_token logit width {} must equal vocab size {}",
        logits.cols(),
        embedding.rows()
    );
    assert!(
        logits.values().iter().all(|v| v.is_finite()),
        "soft_token rejects non-finite logits"
    );
    logits.softmax_rows(temperature).matmul(embedding)
}

/// Latent-view encoding: `[INSTR; ids]` followed by `k` soft thinking steps
/// through the KV cache. No EOS is appended; latent tokens directly extend
/// the query.
pub fn encode_latent<S: Scalar>(
    bb: &BoundBackbone<S>,
    ids: &[u32],
    k: usize,
) -> Result<LatentEncoding<S>, EncodeError> {
    if k == 0 {
        return Err(EncodeError::ZeroThinkingSteps);
    }
    check_tokens(bb, ids)?;
    let cfg = bb.config();
    let len = ids.len() + 1;
    if len + k > cfg.max_seq_len {
        return Err(EncodeError::Overflow { len, extra: k, max: cfg.max_seq_len });
    }
    let temp = S::from_f64(cfg.soft_temperature);

    let mut input = Vec::with_capacity(len);
    input.push(INSTR);
    input.extend_from_slice(ids);

    let mut cache = bb.fresh_cache();
    let hidden = bb.forward(&bb.embed_tokens(&input), Some(&mut cache));
    let mut h_prev = hidden.gather_rows(&[hidden.rows() - 1]);

    let mut trajectory = Vec::with_capacity(k);
    let mut soft_tokens = Vec::with_capacity(k);
    for _ in 0..k {
        let logits = bb.lm_logits(&h_prev);
        let t = soft_token(&logits, bb.embedding(), temp);
        let h = bb.forward(&t, Some(&mut cache));
        soft_tokens.push(t);
        trajectory.push(h.clone());
        h_prev = h;
    }

    let stacked = concat_rows(&trajectory);
    let v = stacked.mean_rows().l2_normalize_rows();
    Ok(LatentEncoding { v, trajectory, soft_tokens, k })
}

/// Cache-free reference path for [`encode_latent`]: every thinking step
/// re-runs a full forward pass over the query plus all soft tokens so far.
pub fn encode_latent_uncached<S: Scalar>(
    bb: &BoundBackbone<S>,
    ids: &[u32],
    k: usize,
) -> Result<LatentEncoding<S>, EncodeError> {
    if k == 0 {
        return Err(EncodeError::ZeroThinkingSteps);
    }
    check_tokens(bb, ids)?;
    let cfg = bb.config();
    let len = ids.len() + 1;
    if len + k > cfg.max_seq_len {
        return Err(EncodeError::Overflow { len, extra: k, max: cfg.max_seq_len });
    }
    let temp = S::from_f64(cfg.soft_temperature);

    let mut input = Vec::with_capacity(len);
    input.push(INSTR);
    input.extend_from_slice(ids);
    let query_embs = bb.embed_tokens(&input);

    let mut parts = vec![query_embs];
    let mut trajectory = Vec::with_capacity(k);
    let mut soft_tokens = Vec::with_capacity(k);
    for _ in 0..k {
        let full = if parts.len() == 1 { parts[0].clone() } else { concat_rows(&parts) };
        let hidden = bb.forward(&full, None);
        let h_last = hidden.gather_rows(&[hidden.rows() - 1]);
        let t = soft_token(&bb.lm_logits(&h_last), bb.embedding(), temp);
        parts.push(t.clone());
        soft_tokens.push(t);
    }
    let full = concat_rows(&parts);
    let hidden = bb.forward(&full, None);
    for j in 0..k {
        trajectory.push(hidden.gather_rows(&[len + j]));
    }

    let stacked = concat_rows(&trajectory);
    let v = stacked.mean_rows().l2_normalize_rows();
    Ok(LatentEncoding { v, trajectory, soft_tokens, k })
}

/// Explicit-view encoding: one pass over
/// `[INSTR; query; seg_1; ...; seg_M; EOS]` against the explicit length
/// budget, extracting the hidden state at the last token of each segment.
pub fn encode_explicit<S: Scalar>(
    bb: &BoundBackbone<S>,
    query_ids: &[u32],
    segments: &[Vec<u32>],
) -> Result<ExplicitEncoding<S>, EncodeError> {
    if segments.is_empty() {
        return Err(EncodeError::EmptyRationale);
    }
    for (index, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(EncodeError::EmptySegment { index });
        }
        check_tokens(bb, seg)?;
    }
    check_tokens(bb, query_ids)?;

    let total: usize = 2 + query_ids.len() + segments.iter().map(|s| s.len()).sum::<usize>();
    let budget = bb.config().max_explicit_len;
    if total > budget {
        return Err(EncodeError::ExplicitOverflow { len: total, max: budget });
    }

    let mut input = Vec::with_capacity(total);
    input.push(INSTR);
    input.extend_from_slice(query_ids);
    let mut seg_ends = Vec::with_capacity(segments.len());
    for seg in segments {
        input.extend_from_slice(seg);
        seg_ends.push(input.len() - 1);
    }
    input.push(EOS);

    let hidden = bb.forward(&bb.embed_tokens(&input), None);
    let segment_states = hidden.gather_rows(&seg_ends);
    let v_star = hidden.gather_rows(&[input.len() - 1]).l2_normalize_rows();
    Ok(ExplicitEncoding { v_star, segment_states, m: segments.len() })
}

/// Plain encoding: normalized hidden state at EOS of `[INSTR; ids; EOS]`.
pub fn encode_plain<S: Scalar>(bb: &BoundBackbone<S>, ids: &[u32]) -> Result<Tensor<S>, EncodeError> {
    check_tokens(bb, ids)?;
    let len = ids.len() + 2;
    if len > bb.config().max_seq_len {
        return Err(EncodeError::Overflow { len, extra: 0, max: bb.config().max_seq_len });
    }
    let mut input = Vec::with_capacity(len);
    input.push(INSTR);
    input.extend_from_slice(ids);
    input.push(EOS);
    let hidden = bb.forward(&bb.embed_tokens(&input), None);
    Ok(hidden.gather_rows(&[input.len() - 1]).l2_normalize_rows())
}

/// Encode one document inside a fresh graph, returning the plain values of
/// its unit embedding.
fn encode_doc_values<S: Scalar>(
    backbone: &Backbone<S>,
    doc: &[u32],
    mode: EncodeMode,
) -> Result<Vec<S>, EncodeError> {
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let v = match mode {
        EncodeMode::Plain => encode_plain(&bb, doc)?,
        EncodeMode::Latent { k } => encode_latent(&bb, doc, k)?.v,
        EncodeMode::Explicit => return Err(EncodeError::UnsupportedCorpusMode),
    };
    Ok(v.values())
}

/// Encode a document collection; row i is the unit embedding of `docs[i]`.
///
/// Work fans out across the current rayon pool; each document is encoded in
/// its own graph, so the result is bitwise identical to sequential
/// execution regardless of worker count.
pub fn encode_corpus<S: Scalar>(
    backbone: &Backbone<S>,
    docs: &[Vec<u32>],
    mode: EncodeMode,
) -> Result<Vec<Vec<S>>, EncodeError> {
    if matches!(mode, EncodeMode::Explicit) {
        return Err(EncodeError::UnsupportedCorpusMode);
    }
    // Validate budgets up front so the reported index is deterministic.
    for (index, doc) in docs.iter().enumerate() {
        let overflow = match mode {
            EncodeMode::Plain => doc.len() + 2 > backbone.config().max_seq_len,
            EncodeMode::Latent { k } => doc.len() + 1 + k > backbone.config().max_seq_len,
            EncodeMode::Explicit => unreachable!(),
        };
        if overflow {
            return Err(EncodeError::Doc {
                index,
                source: Box::new(EncodeError::Overflow {
                    len: doc.len(),
                    extra: 0,
                    max: backbone.config().max_seq_len,
                }),
            });
        }
    }
    docs.par_iter()
        .enumerate()
        .map(|(index, doc)| {
            encode_doc_values(backbone, doc, mode)
                .map_err(|e| EncodeError::Doc { index, source: Box::new(e) })
        })
        .collect()
}

/// Sequential reference for [`encode_corpus`].
pub fn encode_corpus_sequential<S: Scalar>(
    backbone: &Backbone<S>,
    docs: &[Vec<u32>],
    mode: EncodeMode,
) -> Result<Vec<Vec<S>>, EncodeError> {
    if matches!(mode, EncodeMode::Explicit) {
        return Err(EncodeError::UnsupportedCorpusMode);
    }
    docs.iter()
        .enumerate()
        .map(|(index, doc)| {
            encode_doc_values(backbone, doc, mode)
                .map_err(|e| EncodeError::Doc { index, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests;
