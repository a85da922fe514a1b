use std::collections::{HashMap, HashSet};

use super::*;
use crate::backbone::{init_backbone, BackboneConfig};
use crate::data::{gen_multihop, ChainWorld, GenConfig, SegmentStyle};

// ── metrics ──────────────────────────────────────────────────────────

#[test]
fn ndcg_single_relevant_at_rank_one_is_one() {
    let ranking = vec!["a", "b", "c"];
    let gains = HashMap::from([("a", 1.0)]);
    assert_eq!(ndcg_at_k(&ranking, &gains, 10), 1.0);
}

#[test]
fn ndcg_single_relevant_at_rank_two_is_inverse_log() {
    let ranking = vec!["b", "a", "c"];
    let gains = HashMap::from([("a", 1.0)]);
    let want = 1.0 / 3f64.log2();
    assert!((ndcg_at_k(&ranking, &gains, 10) - want).abs() < 1e-12);
    assert!((want - 0.63093).abs() < 1e-5);
}

#[test]
fn ndcg_matches_exhaustive_ideal_oracle_on_graded_docs() {
    // Oracle: the ideal DCG is the max over every permutation of the
    // relevant gains placed at the top.
    fn dcg(gains_in_order: &[f64]) -> f64 {
        gains_in_order.iter().enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum()
    }
    fn permutations(v: Vec<f64>) -> Vec<Vec<f64>> {
        if v.len() <= 1 {
            return vec![v];
        }
        let mut out = Vec::new();
        for i in 0..v.len() {
            let mut rest = v.clone();
            let head = rest.remove(i);
            for mut p in permutations(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    let ranking = vec!["x", "g1", "y", "g3", "g2", "z"];
    let gains = HashMap::from([("g1", 2.0), ("g2", 3.0), ("g3", 0.5)]);
    let k = 6;

    let got = ndcg_at_k(&ranking, &gains, k);

    let actual_in_order: Vec<f64> =
        ranking.iter().take(k).map(|id| gains.get(id).copied().unwrap_or(0.0)).collect();
    let ideal = permutations(vec![2.0, 3.0, 0.5])
        .into_iter()
        .map(|p| dcg(&p))
        .fold(f64::MIN, f64::max);
    let want = dcg(&actual_in_order) / ideal;
    assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    assert!((0.0..=1.0).contains(&got));
}

#[test]
fn metrics_ignore_the_irrelevant_tail_beyond_k() {
    let gains = HashMap::from([("a", 1.0)]);
    let relevant = HashSet::from(["a"]);
    let base = vec!["a", "t1", "t2", "t3", "t4"];
    let permuted = vec!["a", "t3", "t1", "t4", "t2"];
    assert_eq!(ndcg_at_k(&base, &gains, 1), ndcg_at_k(&permuted, &gains, 1));
    assert_eq!(recall_at_k(&base, &relevant, 1), recall_at_k(&permuted, &relevant, 1));
    assert_eq!(mrr(&base, &relevant), mrr(&permuted, &relevant));
}

#[test]
#[should_panic(expected = "duplicate id at rank")]
fn metrics_reject_duplicate_rankings() {
    let gains = HashMap::from([("a", 1.0)]);
    let _ = ndcg_at_k(&["a", "b", "a"], &gains, 10);
}

#[test]
fn recall_and_mrr_definitions() {
    let relevant: HashSet<&str> = HashSet::from(["a", "b"]);
    // One of two relevant docs in the top-2: recall contribution 1/2.
    assert_eq!(recall_at_k(&["a", "x", "y"], &relevant, 2), 0.5);
    assert_eq!(recall_at_k(&["x", "y", "z"], &relevant, 3), 0.0);
    // First relevant at rank 4.
    assert_eq!(mrr(&["x", "y", "z", "a"], &relevant), 0.25);
    assert_eq!(mrr(&["x", "y"], &relevant), 0.0);
}

// ── evaluate ─────────────────────────────────────────────────────────

fn eval_gen_cfg() -> GenConfig {
    GenConfig {
        vocab_size: 64,
        n_keys: 24,
        hops: 2,
        n_train: 30,
        n_eval: 20,
        n_eval_chains: 6,
        corpus_size: 60,
        distractors_per_doc: 4,
        query_noise: 3,
        hard_negs_per_example: 1,
        max_seq_tokens: 12,
        max_explicit_tokens: 32,
        seed: 77,
        segment_style: SegmentStyle::PerHop,
    }
}

fn eval_backbone() -> crate::backbone::Backbone<f32> {
    init_backbone(&BackboneConfig {
        vocab_size: 64,
        model_dim: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_mult: 2,
        max_seq_len: 40,
        max_explicit_len: 32,
        tie_lm_head: true,
        soft_temperature: 1.0,
        seed: 5,
    })
    .unwrap()
}

#[test]
fn perfect_oracle_embeddings_score_ndcg_one() {
    // A "model" that one-hot encodes the chain key ranks every gold
    // document first.
    let cfg = eval_gen_cfg();
    let (_, eval_ds, corpus) = gen_multihop(&cfg).unwrap();
    let world = ChainWorld::from_config(&cfg);
    let dim = cfg.vocab_size;
    let one_hot = |t: u32| {
        let mut v = vec![0.0f32; dim];
        v[t as usize] = 1.0;
        v
    };
    let corpus_embs: Vec<Vec<f32>> = corpus
        .docs
        .iter()
        .map(|d| {
            let key = d.tokens.iter().copied().find(|&t| world.is_key(t)).unwrap_or(d.tokens[0]);
            one_hot(key)
        })
        .collect();
    let doc_ids: Vec<String> = corpus.docs.iter().map(|d| d.doc_id.clone()).collect();
    let index = corpus.content_index();

    let mut total_ndcg = 0.0;
    for ex in &eval_ds.examples {
        let final_key = *ex.meta.chain.last().unwrap();
        let ranked = rank_against_corpus(&one_hot(final_key), &corpus_embs, &doc_ids);
        let order: Vec<usize> = ranked.iter().map(|(i, _)| *i).collect();
        let gold_id = index[ex.positive.as_slice()];
        let gold = doc_ids.iter().position(|id| id == gold_id).unwrap();
        total_ndcg += ndcg_at_k(&order, &HashMap::from([(gold, 1.0)]), 10);
    }
    assert_eq!(total_ndcg / eval_ds.examples.len() as f64, 1.0);
}

#[test]
fn evaluate_matches_direct_reimplementation() {
    let cfg = eval_gen_cfg();
    let (_, eval_ds, corpus) = gen_multihop(&cfg).unwrap();
    let backbone = eval_backbone();

    let result =
        evaluate(&backbone, &eval_ds, &corpus, EncodeMode::Latent { k: 2 }, EncodeMode::Plain)
            .unwrap();

    // Direct reimplementation: re-encode everything, score with explicit
    // loops, rank with the same tie rule, apply textbook metric formulas.
    let docs: Vec<Vec<u32>> = corpus.docs.iter().map(|d| d.tokens.clone()).collect();
    let corpus_embs =
        crate::encoder::encode_corpus_sequential(&backbone, &docs, EncodeMode::Plain).unwrap();
    let index = corpus.content_index();
    let mut ndcg_sum = 0.0;
    let mut r10_sum = 0.0;
    let mut mrr_sum = 0.0;
    for ex in &eval_ds.examples {
        let g = crate::autodiff::Graph::new();
        let bb = backbone.bind(&g, false);
        let q = crate::encoder::encode_latent(&bb, &ex.query, 2).unwrap().v.values();
        let mut scored: Vec<(usize, f32)> = Vec::new();
        for (i, d) in corpus_embs.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..q.len() {
                s += q[j] * d[j];
            }
            scored.push((i, s));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| corpus.docs[a.0].doc_id.cmp(&corpus.docs[b.0].doc_id))
        });
        let gold_id = index[ex.positive.as_slice()];
        let rank = scored
            .iter()
            .position(|(i, _)| corpus.docs[*i].doc_id == gold_id)
            .unwrap()
            + 1;
        ndcg_sum += if rank <= 10 { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
        r10_sum += if rank <= 10 { 1.0 } else { 0.0 };
        mrr_sum += 1.0 / rank as f64;
    }
    let n = eval_ds.examples.len() as f64;
    assert!((result.ndcg_at_10 - ndcg_sum / n).abs() < 1e-12);
    assert!((result.recall_at_10 - r10_sum / n).abs() < 1e-12);
    assert!((result.mrr - mrr_sum / n).abs() < 1e-12);
    assert_eq!(result.n_queries, eval_ds.examples.len());
    assert!(result.skipped.is_empty());

    // Gold ranks recorded per query agree with the direct path.
    for q in &result.per_query {
        assert!(q.gold_rank >= 1 && q.gold_rank <= corpus.docs.len());
        assert_eq!(q.top.len(), 10.min(corpus.docs.len()));
    }
}

#[test]
fn k_sweeps_share_identical_corpus_embeddings_in_plain_doc_mode() {
    let cfg = eval_gen_cfg();
    let (_, eval_ds, corpus) = gen_multihop(&cfg).unwrap();
    let backbone = eval_backbone();
    let docs: Vec<Vec<u32>> = corpus.docs.iter().map(|d| d.tokens.clone()).collect();

    let embs_a = crate::encoder::encode_corpus(&backbone, &docs, EncodeMode::Plain).unwrap();
    let embs_b = crate::encoder::encode_corpus(&backbone, &docs, EncodeMode::Plain).unwrap();
    assert_eq!(embs_a, embs_b, "plain corpus embeddings must not depend on K");

    let mut results = Vec::new();
    for k in [1usize, 3, 6] {
        let r = evaluate_with_embeddings(
            &backbone,
            &eval_ds,
            &corpus,
            &embs_a,
            EncodeMode::Latent { k },
            EncodeMode::Plain,
        )
        .unwrap();
        results.push(r);
    }
    assert_eq!(results.len(), 3);
    for r in &results {
        assert!(r.ndcg_at_10 >= 0.0 && r.ndcg_at_10 <= 1.0);
        assert!(r.recall_at_1 <= r.recall_at_5 && r.recall_at_5 <= r.recall_at_10);
    }
}

#[test]
fn evaluate_skips_and_reports_overflowing_queries() {
    let cfg = eval_gen_cfg();
    let (_, mut eval_ds, corpus) = gen_multihop(&cfg).unwrap();
    // Make query 3 exceed the sequence budget (40) while keeping tokens in
    // vocab.
    eval_ds.examples[3].query = vec![60u32; 50];
    let backbone = eval_backbone();
    let r = evaluate(&backbone, &eval_ds, &corpus, EncodeMode::Latent { k: 2 }, EncodeMode::Plain)
        .unwrap();
    assert_eq!(r.skipped, vec![3]);
    assert_eq!(r.n_queries, eval_ds.examples.len() - 1);
}

#[test]
fn evaluate_rejects_missing_gold() {
    let cfg = eval_gen_cfg();
    let (_, mut eval_ds, corpus) = gen_multihop(&cfg).unwrap();
    eval_ds.examples[0].positive = vec![60, 61, 62];
    let backbone = eval_backbone();
    let err =
        evaluate(&backbone, &eval_ds, &corpus, EncodeMode::Plain, EncodeMode::Plain).unwrap_err();
    assert!(matches!(err, EvalError::GoldMissing { query_index: 0 }));
}

// ── latency ──────────────────────────────────────────────────────────

#[test]
fn latency_medians_are_monotone_in_k() {
    let backbone = eval_backbone();
    let queries: Vec<Vec<u32>> = (0..4).map(|i| vec![4 + i as u32; 10]).collect();
    let slow = bench_latency(
        &backbone,
        &queries,
        &LatencyConfig { k_latent: 8, rewrite_len: 8, warmup: 2, rounds: 8 },
    )
    .unwrap();
    let fast = bench_latency(
        &backbone,
        &queries,
        &LatencyConfig { k_latent: 1, rewrite_len: 8, warmup: 2, rounds: 8 },
    )
    .unwrap();
    assert!(
        slow.latent.median_us > fast.latent.median_us,
        "k=8 median {} should exceed k=1 median {}",
        slow.latent.median_us,
        fast.latent.median_us
    );
}

#[test]
fn rewrite_decode_is_deterministic_and_budgeted() {
    let backbone = eval_backbone();
    let query = vec![4u32, 9, 12];
    let (v1, d1) = rewrite_then_encode(&backbone, &query, 8).unwrap();
    let (v2, d2) = rewrite_then_encode(&backbone, &query, 8).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(v1, v2);
    assert_eq!(d1.len(), 8);
    let norm: f32 = v1.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);

    let long_query = vec![4u32; 35];
    assert!(matches!(
        rewrite_then_encode(&backbone, &long_query, 16),
        Err(LatencyError::RewriteOverflow { .. })
    ));
}
