//! Per-query latency of the three query-encoding strategies.
//!
//! - plain: one forward pass over `[INSTR; q; EOS]`
//! - latent: forward over `[INSTR; q]` plus K incremental soft-token steps
//!   through the KV cache
//! - explicit: greedy autoregressive decode of R discrete tokens with the
//!   backbone's own LM head (standing in for an external rewriter),
//!   followed by a fresh encode of `[INSTR; q; decoded; EOS]`
//!
//! The bench runs single-worker; warmup iterations are excluded from the
//! statistics.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::backbone::{Backbone, EOS, INSTR};
use crate::encoder::{encode_latent, encode_plain, EncodeError};

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("query of {len} tokens plus {extra} decoded tokens exceeds max_seq_len {max}")]
    RewriteOverflow { len: usize, extra: usize, max: usize },
    #[error("latency bench requires at least one query")]
    NoQueries,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyConfig {
    /// Latent thinking steps for the latent mode.
    pub k_latent: usize,
    /// Decoded rationale length R for the explicit (rewrite) mode.
    pub rewrite_len: usize,
    /// Unmeasured warmup passes per mode.
    pub warmup: usize,
    /// Measured passes per query per mode.
    pub rounds: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig { k_latent: 3, rewrite_len: 64, warmup: 2, rounds: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: String,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub samples: usize,
    /// Total transformer positions processed across measured samples.
    pub tokens_processed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub plain: ModeTiming,
    pub latent: ModeTiming,
    pub explicit: ModeTiming,
    pub latent_over_plain: f64,
    pub latent_over_explicit: f64,
    pub k_latent: usize,
    pub rewrite_len: usize,
}

fn summarize(mode: &str, mut samples_us: Vec<f64>, tokens: u64) -> ModeTiming {
    let n = samples_us.len();
    let mean = samples_us.iter().sum::<f64>() / n as f64;
    samples_us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = samples_us[n / 2];
    let p95 = samples_us[((n as f64 * 0.95) as usize).min(n - 1)];
    ModeTiming { mode: mode.into(), mean_us: mean, median_us: median, p95_us: p95, samples: n, tokens_processed: tokens }
}

/// Greedy rewrite-then-retrieve: decode `rewrite_len` discrete tokens, then
/// encode the query concatenated with the decoded rationale. Returns the
/// unit embedding and the decoded tokens.
pub fn rewrite_then_encode(
    backbone: &Backbone<f32>,
    query: &[u32],
    rewrite_len: usize,
) -> Result<(Vec<f32>, Vec<u32>), LatencyError> {
    let cfg = backbone.config();
    let needed = query.len() + 2 + rewrite_len;
    if needed > cfg.max_seq_len {
        return Err(LatencyError::RewriteOverflow {
            len: query.len(),
            extra: rewrite_len,
            max: cfg.max_seq_len,
        });
    }

    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let mut input = Vec::with_capacity(query.len() + 1);
    input.push(INSTR);
    input.extend_from_slice(query);

    let mut cache = bb.fresh_cache();
    let hidden = bb.forward(&bb.embed_tokens(&input), Some(&mut cache));
    let mut h_last = hidden.gather_rows(&[hidden.rows() - 1]);

    let mut decoded = Vec::with_capacity(rewrite_len);
    for _ in 0..rewrite_len {
        let logits = bb.lm_logits(&h_last).values();
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let token = best as u32;
        decoded.push(token);
        h_last = bb.forward(&bb.embed_tokens(&[token]), Some(&mut cache));
    }

    // Fresh single-pass encode of the rewritten query, as the pipeline's
    // retriever would run it.
    let g2 = Graph::new();
    let bb2 = backbone.bind(&g2, false);
    let mut rewritten = Vec::with_capacity(query.len() + rewrite_len + 2);
    rewritten.push(INSTR);
    rewritten.extend_from_slice(query);
    rewritten.extend_from_slice(&decoded);
    rewritten.push(EOS);
    let hidden = bb2.forward(&bb2.embed_tokens(&rewritten), None);
    let v = hidden.gather_rows(&[rewritten.len() - 1]).l2_normalize_rows();
    Ok((v.values(), decoded))
}

/// Benchmark the three encoding modes over a query set.
pub fn bench_latency(
    backbone: &Backbone<f32>,
    queries: &[Vec<u32>],
    cfg: &LatencyConfig,
) -> Result<LatencyReport, LatencyError> {
    if queries.is_empty() {
        return Err(LatencyError::NoQueries);
    }
    // Validate budgets up front so timing loops cannot fail mid-flight.
    let max = backbone.config().max_seq_len;
    for q in queries {
        if q.len() + 2 + cfg.rewrite_len > max {
            return Err(LatencyError::RewriteOverflow {
                len: q.len(),
                extra: cfg.rewrite_len,
                max,
            });
        }
    }

    let run_plain = |q: &Vec<u32>| {
        let g = Graph::new();
        let bb = backbone.bind(&g, false);
        encode_plain(&bb, q).expect("validated above");
    };
    let run_latent = |q: &Vec<u32>| {
        let g = Graph::new();
        let bb = backbone.bind(&g, false);
        encode_latent(&bb, q, cfg.k_latent).expect("validated above");
    };
    let run_explicit = |q: &Vec<u32>| {
        rewrite_then_encode(backbone, q, cfg.rewrite_len).expect("validated above");
    };

    for q in queries.iter().take(cfg.warmup.max(1)) {
        run_plain(q);
        run_latent(q);
        run_explicit(q);
    }

    let mut plain_us = Vec::new();
    let mut latent_us = Vec::new();
    let mut explicit_us = Vec::new();
    let mut tokens = [0u64; 3];
    for _ in 0..cfg.rounds {
        for q in queries {
            let t = Instant::now();
            run_plain(q);
            plain_us.push(t.elapsed().as_secs_f64() * 1e6);
            tokens[0] += q.len() as u64 + 2;

            let t = Instant::now();
            run_latent(q);
            latent_us.push(t.elapsed().as_secs_f64() * 1e6);
            tokens[1] += q.len() as u64 + 1 + cfg.k_latent as u64;

            let t = Instant::now();
            run_explicit(q);
            explicit_us.push(t.elapsed().as_secs_f64() * 1e6);
            tokens[2] += 2 * (q.len() as u64 + 1) + 2 * cfg.rewrite_len as u64 + 1;
        }
    }

    let plain = summarize("plain", plain_us, tokens[0]);
    let latent = summarize(&format!("latent(k={})", cfg.k_latent), latent_us, tokens[1]);
    let explicit = summarize(&format!("explicit(r={})", cfg.rewrite_len), explicit_us, tokens[2]);
    let latent_over_plain = latent.mean_us / plain.mean_us;
    let latent_over_explicit = latent.mean_us / explicit.mean_us;
    Ok(LatencyReport {
        plain,
        latent,
        explicit,
        latent_over_plain,
        latent_over_explicit,
        k_latent: cfg.k_latent,
        rewrite_len: cfg.rewrite_len,
    })
}
