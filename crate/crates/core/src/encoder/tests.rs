use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{init_backbone, BackboneConfig, SEG};

fn test_backbone() -> Backbone<f32> {
    let cfg = BackboneConfig {
        vocab_size: 32,
        model_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_mult: 2,
        max_seq_len: 32,
        max_explicit_len: 24,
        tie_lm_head: true,
        soft_temperature: 1.0,
        seed: 42,
    };
    init_backbone(&cfg).unwrap()
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

// ── soft_token ───────────────────────────────────────────────────────

#[test]
fn soft_token_hard_selection_limit() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let mut logits = vec![0.0f32; 32];
    logits[11] = 1000.0;
    let t = soft_token(&g.constant(1, 32, &logits), bb.embedding(), 1.0);
    let e11 = &backbone.params()[0].data[11 * 16..12 * 16];
    for (a, b) in t.values().iter().zip(e11.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn soft_token_uniform_gives_column_mean() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let t = soft_token(&g.constant(1, 32, &vec![0.25f32; 32]), bb.embedding(), 1.0);
    let e = &backbone.params()[0];
    for (j, v) in t.values().iter().enumerate() {
        let mean: f32 = (0..32).map(|r| e.data[r * 16 + j]).sum::<f32>() / 32.0;
        assert!((v - mean).abs() < 1e-6);
    }
}

#[test]
fn soft_token_stays_in_convex_hull() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let e = &backbone.params()[0];
    let mut lo = vec![f32::INFINITY; 16];
    let mut hi = vec![f32::NEG_INFINITY; 16];
    for r in 0..32 {
        for j in 0..16 {
            lo[j] = lo[j].min(e.data[r * 16 + j]);
            hi[j] = hi[j].max(e.data[r * 16 + j]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let logits: Vec<f32> = (0..32).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let t = soft_token(&g.constant(1, 32, &logits), bb.embedding(), rng.gen_range(0.05..4.0));
        for (j, v) in t.values().iter().enumerate() {
            assert!(v >= &(lo[j] - 1e-6) && v <= &(hi[j] + 1e-6), "coordinate {j} escaped the hull");
        }
    }
}

#[test]
#[should_panic(expected = "non-finite logits")]
fn soft_token_rejects_non_finite_logits() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let mut logits = vec![0.0f32; 32];
    logits[0] = f32::NAN;
    // Bypass leaf validation by poisoning in place.
    let t = g.constant(1, 32, &vec![0.0; 32]);
    t.set_values(&logits);
    let _ = soft_token(&t, bb.embedding(), 1.0);
}

// ── encode_latent ────────────────────────────────────────────────────

#[test]
fn latent_k1_pools_single_state() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let enc = encode_latent(&bb, &[4, 5, 6], 1).unwrap();
    assert_eq!(enc.trajectory.len(), 1);
    let manual = enc.trajectory[0].l2_normalize_rows().values();
    assert_eq!(enc.v.values(), manual);
}

#[test]
fn latent_cached_matches_uncached_recompute() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let ids = [4, 9, 21, 7, 30, 12];
    let cached = encode_latent(&bb, &ids, 3).unwrap();
    let uncached = encode_latent_uncached(&bb, &ids, 3).unwrap();
    let mut max_diff = 0.0f32;
    for (a, b) in cached.v.values().iter().zip(uncached.v.values().iter()) {
        max_diff = max_diff.max((a - b).abs());
    }
    assert!(max_diff < 1e-5, "cached vs uncached diff {max_diff}");
    for (ht, hu) in cached.trajectory.iter().zip(uncached.trajectory.iter()) {
        for (a, b) in ht.values().iter().zip(hu.values().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn latent_encodings_distinguish_queries() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let a = encode_latent(&bb, &[4, 5, 6], 3).unwrap();
    let b = encode_latent(&bb, &[7, 8, 9], 3).unwrap();
    let cos = cosine(&a.v.values(), &b.v.values());
    assert!(cos < 0.999, "cosine {cos} suspiciously close to 1");
}

#[test]
fn latent_trajectory_has_prefix_property_under_k_extension() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let ids = [4, 9, 21, 7];
    let short = encode_latent(&bb, &ids, 2).unwrap();
    let long = encode_latent(&bb, &ids, 5).unwrap();
    for (a, b) in short.trajectory.iter().zip(long.trajectory.iter()) {
        assert_eq!(a.values(), b.values(), "prefix state differs");
    }
    for (a, b) in short.soft_tokens.iter().zip(long.soft_tokens.iter()) {
        assert_eq!(a.values(), b.values(), "prefix soft token differs");
    }
}

#[test]
fn latent_rejects_k_zero_and_overflow() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    assert!(matches!(encode_latent(&bb, &[4], 0), Err(EncodeError::ZeroThinkingSteps)));
    let long: Vec<u32> = (0..31).map(|i| 4 + (i % 20) as u32).collect();
    assert!(matches!(encode_latent(&bb, &long, 3), Err(EncodeError::Overflow { .. })));
}

// ── encode_explicit ──────────────────────────────────────────────────

#[test]
fn explicit_single_placeholder_segment_sits_before_eos() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let query = [4, 5];
    let enc = encode_explicit(&bb, &query, &[vec![SEG]]).unwrap();
    assert_eq!(enc.m, 1);

    // Recompute the full pass: the segment state must be the hidden state
    // immediately before EOS.
    let input = [INSTR, 4, 5, SEG, EOS];
    let hidden = bb.forward(&bb.embed_tokens(&input), None);
    let before_eos = hidden.gather_rows(&[input.len() - 2]).values();
    assert_eq!(enc.segment_states.values(), before_eos);
}

#[test]
fn explicit_appending_segment_changes_v_star() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let query = [4, 5, 6];
    let a = encode_explicit(&bb, &query, &[vec![7, 8, SEG]]).unwrap();
    let b = encode_explicit(&bb, &query, &[vec![7, 8, SEG], vec![9, 10, SEG]]).unwrap();
    let cos = cosine(&a.v_star.values(), &b.v_star.values());
    assert!(cos < 1.0 - 1e-6, "EOS state ignored the appended segment (cos {cos})");
}

#[test]
fn explicit_rejects_empty_segment_and_empty_rationale() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    assert!(matches!(encode_explicit(&bb, &[4], &[]), Err(EncodeError::EmptyRationale)));
    assert!(matches!(
        encode_explicit(&bb, &[4], &[vec![5], vec![]]),
        Err(EncodeError::EmptySegment { index: 1 })
    ));
}

#[test]
fn explicit_respects_its_own_budget() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    // 24-token explicit budget; 30 tokens of rationale must be rejected even
    // though max_seq_len would allow it.
    let seg: Vec<u32> = (0..30).map(|i| 4 + (i % 20) as u32).collect();
    assert!(matches!(
        encode_explicit(&bb, &[4], &[seg]),
        Err(EncodeError::ExplicitOverflow { .. })
    ));
}

// ── encode_plain ─────────────────────────────────────────────────────

#[test]
fn plain_is_deterministic_unit_norm_and_distinct_from_latent() {
    let backbone = test_backbone();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let ids = [4, 9, 21];
    let a = encode_plain(&bb, &ids).unwrap().values();
    let b = encode_plain(&bb, &ids).unwrap().values();
    assert_eq!(a, b);
    let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);

    let latent = encode_latent(&bb, &ids, 2).unwrap().v.values();
    assert!(cosine(&a, &latent) < 1.0 - 1e-6, "plain and latent encodings coincide");
}

// ── encode_corpus ────────────────────────────────────────────────────

#[test]
fn corpus_single_doc_matches_direct_encoder() {
    let backbone = test_backbone();
    let doc = vec![4u32, 7, 9];
    let rows = encode_corpus(&backbone, std::slice::from_ref(&doc), EncodeMode::Latent { k: 2 }).unwrap();
    let g = Graph::new();
    let bb = backbone.bind(&g, false);
    let direct = encode_latent(&bb, &doc, 2).unwrap().v.values();
    assert_eq!(rows[0], direct);
}

#[test]
fn corpus_permutation_permutes_rows() {
    let backbone = test_backbone();
    let docs = vec![vec![4u32, 5], vec![6u32, 7], vec![8u32, 9]];
    let fwd = encode_corpus(&backbone, &docs, EncodeMode::Plain).unwrap();
    let rev: Vec<Vec<u32>> = docs.iter().rev().cloned().collect();
    let bwd = encode_corpus(&backbone, &rev, EncodeMode::Plain).unwrap();
    assert_eq!(fwd[0], bwd[2]);
    assert_eq!(fwd[1], bwd[1]);
    assert_eq!(fwd[2], bwd[0]);
}

#[test]
fn corpus_parallel_matches_sequential_bitwise() {
    let backbone = test_backbone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let docs: Vec<Vec<u32>> = (0..24)
        .map(|_| (0..rng.gen_range(2..8)).map(|_| rng.gen_range(4..32)).collect())
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel = pool.install(|| encode_corpus(&backbone, &docs, EncodeMode::Latent { k: 2 })).unwrap();
    let sequential = encode_corpus_sequential(&backbone, &docs, EncodeMode::Latent { k: 2 }).unwrap();
    assert_eq!(parallel, sequential);
}

#[test]
fn corpus_overflow_reports_document_index() {
    let backbone = test_backbone();
    let docs = vec![vec![4u32, 5], (0..40).map(|i| 4 + (i % 20) as u32).collect::<Vec<_>>()];
    let err = encode_corpus(&backbone, &docs, EncodeMode::Plain).unwrap_err();
    match err {
        EncodeError::Doc { index, .. } => assert_eq!(index, 1),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(matches!(
        encode_corpus(&backbone, &docs, EncodeMode::Explicit),
        Err(EncodeError::UnsupportedCorpusMode)
    ));
}

// ── embedding dump ───────────────────────────────────────────────────

#[test]
fn embedding_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let ids = vec!["d0".to_string(), "d1".to_string(), "d2".to_string()];
    let embs = vec![vec![1.0f32, -2.5, 0.25], vec![0.0, 3.5, -1.0], vec![9.0, 8.0, 7.0]];
    write_embeddings(&path, &ids, &embs).unwrap();
    let (rids, rembs) = read_embeddings(&path).unwrap();
    assert_eq!(rids, ids);
    assert_eq!(rembs, embs);

    // Corrupt the magic.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_embeddings(&path), Err(EmbFileError::BadMagic)));
}
