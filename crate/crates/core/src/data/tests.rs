use super::*;

fn small_cfg() -> GenConfig {
    GenConfig {
        vocab_size: 64,
        n_keys: 24,
        hops: 2,
        n_train: 40,
        n_eval: 12,
        n_eval_chains: 6,
        corpus_size: 80,
        distractors_per_doc: 5,
        query_noise: 4,
        hard_negs_per_example: 2,
        max_seq_tokens: 16,
        max_explicit_tokens: 32,
        seed: 3,
        segment_style: SegmentStyle::PerHop,
    }
}

#[test]
fn single_hop_has_one_segment_and_positive_holds_k2() {
    let cfg = GenConfig { hops: 1, ..small_cfg() };
    let (train, _, _) = gen_multihop(&cfg).unwrap();
    for ex in &train.examples {
        assert_eq!(ex.segments.len(), 1);
        assert_eq!(ex.meta.chain.len(), 2);
        assert!(ex.positive.contains(&ex.meta.chain[1]));
    }
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let cfg = small_cfg();
    let a = gen_multihop(&cfg).unwrap();
    let b = gen_multihop(&cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);

    let c = gen_multihop(&GenConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.0.examples, c.0.examples);
}

#[test]
fn every_example_satisfies_the_ground_truth_property() {
    let (train, eval, _) = gen_multihop(&small_cfg()).unwrap();
    for ex in train.examples.iter().chain(eval.examples.iter()) {
        assert!(example_satisfies_ground_truth(ex));
        // Queries carry exactly one key token so the chain start is
        // unambiguous.
        let world = ChainWorld::from_config(&small_cfg());
        let keys: Vec<u32> = ex.query.iter().copied().filter(|&t| world.is_key(t)).collect();
        assert_eq!(keys, vec![ex.meta.chain[0]]);
    }
}

#[test]
fn train_and_eval_chains_are_disjoint() {
    let (train, eval, _) = gen_multihop(&small_cfg()).unwrap();
    let train_chains: std::collections::HashSet<Vec<u32>> =
        train.examples.iter().map(|e| e.meta.chain.clone()).collect();
    let train_starts: std::collections::HashSet<u32> =
        train.examples.iter().map(|e| e.meta.chain[0]).collect();
    let train_finals: std::collections::HashSet<u32> =
        train.examples.iter().map(|e| *e.meta.chain.last().unwrap()).collect();

    for ex in &eval.examples {
        assert!(!train_chains.contains(&ex.meta.chain), "eval chain leaked into train");
        assert!(!train_starts.contains(&ex.meta.chain[0]), "eval start key used by a train chain");
        assert!(
            !train_finals.contains(ex.meta.chain.last().unwrap()),
            "eval final key is a train final key"
        );
    }
}

#[test]
fn every_eval_link_appears_in_some_train_rationale() {
    // Learnability: the held-out chains must be composable from links that
    // do occur in training rationales.
    let (train, eval, _) = gen_multihop(&small_cfg()).unwrap();
    let mut train_links: std::collections::HashSet<(u32, u32)> = Default::default();
    for ex in &train.examples {
        for seg in &ex.segments {
            train_links.insert((seg[0], seg[1]));
        }
    }
    for ex in &eval.examples {
        for pair in ex.meta.chain.windows(2) {
            assert!(
                train_links.contains(&(pair[0], pair[1])),
                "eval link {pair:?} never appears in training rationales"
            );
        }
    }
}

#[test]
fn symbolic_oracle_resolves_every_eval_query() {
    let cfg = small_cfg();
    let (_, eval, corpus) = gen_multihop(&cfg).unwrap();
    let world = ChainWorld::from_config(&cfg);
    let index = corpus.content_index();
    let mut solved = 0;
    for ex in &eval.examples {
        let final_key = solve_query(&world, &ex.query, cfg.hops).expect("query has one key");
        assert_eq!(final_key, *ex.meta.chain.last().unwrap());
        // Exactly one corpus document holds the final key, and it is the
        // example's positive.
        let holders: Vec<&CorpusDoc> =
            corpus.docs.iter().filter(|d| d.tokens.contains(&final_key)).collect();
        assert_eq!(holders.len(), 1, "final key {final_key} appears in {} docs", holders.len());
        assert_eq!(holders[0].tokens, ex.positive);
        assert_eq!(index[ex.positive.as_slice()], holders[0].doc_id);
        solved += 1;
    }
    assert_eq!(solved, eval.examples.len());
}

#[test]
fn corpus_is_sized_and_unique() {
    let cfg = small_cfg();
    let (_, _, corpus) = gen_multihop(&cfg).unwrap();
    assert_eq!(corpus.docs.len(), cfg.corpus_size);
    let ids: std::collections::HashSet<&str> =
        corpus.docs.iter().map(|d| d.doc_id.as_str()).collect();
    assert_eq!(ids.len(), cfg.corpus_size);
    let contents: std::collections::HashSet<&[u32]> =
        corpus.docs.iter().map(|d| d.tokens.as_slice()).collect();
    assert_eq!(contents.len(), cfg.corpus_size);
    for d in &corpus.docs {
        assert!(d.tokens.len() <= cfg.max_seq_tokens);
    }
}

#[test]
fn infeasible_configs_are_rejected() {
    assert!(matches!(
        gen_multihop(&GenConfig { vocab_size: 28, ..small_cfg() }),
        Err(GenError::NoNoiseTokens { .. })
    ));
    assert!(matches!(
        gen_multihop(&GenConfig { hops: 0, ..small_cfg() }),
        Err(GenError::NoHops)
    ));
    assert!(matches!(
        gen_multihop(&GenConfig { n_eval_chains: 20, ..small_cfg() }),
        Err(GenError::EvalChainsDontFit { .. })
    ));
    assert!(matches!(
        gen_multihop(&GenConfig { query_noise: 40, ..small_cfg() }),
        Err(GenError::QueryBudget { .. })
    ));
    assert!(matches!(
        gen_multihop(&GenConfig { max_explicit_tokens: 8, ..small_cfg() }),
        Err(GenError::ExplicitBudget { .. })
    ));
    assert!(matches!(
        gen_multihop(&GenConfig { corpus_size: 3, ..small_cfg() }),
        Err(GenError::CorpusTooSmall { .. })
    ));
}

// ── batching ─────────────────────────────────────────────────────────

/// Indices of examples with pairwise-distinct positives.
fn distinct_indices(ds: &Dataset, n: usize) -> Vec<usize> {
    let mut seen: std::collections::HashSet<&[u32]> = Default::default();
    let mut out = Vec::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        if seen.insert(ex.positive.as_slice()) {
            out.push(i);
            if out.len() == n {
                break;
            }
        }
    }
    assert_eq!(out.len(), n, "dataset too small for {n} distinct positives");
    out
}

#[test]
fn single_query_batch_has_two_docs() {
    let (train, _, _) = gen_multihop(&small_cfg()).unwrap();
    let batch = make_batch(&train, &distinct_indices(&train, 1), 1).unwrap();
    assert_eq!(batch.docs.len(), 2);
    assert_eq!(batch.positive, vec![0]);
}

#[test]
fn four_query_batch_pools_eight_candidates() {
    let (train, _, _) = gen_multihop(&small_cfg()).unwrap();
    let batch = make_batch(&train, &distinct_indices(&train, 4), 1).unwrap();
    assert_eq!(batch.docs.len(), 8, "4 queries x (1 positive + 1 hard negative)");
    for (i, ex) in batch.examples.iter().enumerate() {
        assert_eq!(batch.docs[batch.positive[i]], ex.positive);
    }
}

#[test]
fn positive_indices_track_content_under_reordering() {
    let (train, _, _) = gen_multihop(&small_cfg()).unwrap();
    let idx = distinct_indices(&train, 4);
    let fwd = make_batch(&train, &idx, 1).unwrap();
    let rev: Vec<usize> = idx.iter().rev().copied().collect();
    let bwd = make_batch(&train, &rev, 1).unwrap();
    for i in 0..4 {
        let a = &fwd.docs[fwd.positive[i]];
        let b = &bwd.docs[bwd.positive[3 - i]];
        assert_eq!(a, b, "query {i} positive content changed under reordering");
    }
}

#[test]
fn duplicate_positive_content_triggers_resample() {
    let (train, _, _) = gen_multihop(&small_cfg()).unwrap();
    // Two examples of the same chain share one positive document by
    // construction; find such a pair.
    let mut by_chain: std::collections::HashMap<Vec<u32>, Vec<usize>> = Default::default();
    for (i, ex) in train.examples.iter().enumerate() {
        by_chain.entry(ex.meta.chain.clone()).or_default().push(i);
    }
    let dup = by_chain.values().find(|v| v.len() >= 2).expect("no duplicate chain in train split");
    let batch = make_batch(&train, &dup[..2], 1).unwrap();
    assert_eq!(batch.resampled.len(), 1);
    assert_eq!(batch.resampled[0].0, 1, "the second offender is resampled");
    assert_ne!(batch.examples[0].positive, batch.examples[1].positive);
}

#[test]
fn batch_rejects_missing_hard_negatives() {
    let (train, _, _) = gen_multihop(&small_cfg()).unwrap();
    let err = make_batch(&train, &distinct_indices(&train, 2), 5).unwrap_err();
    assert!(matches!(err, BatchError::NotEnoughHardNegatives { .. }));
}

// ── file round trips ─────────────────────────────────────────────────

#[test]
fn dataset_round_trips_bitwise() {
    let cfg = GenConfig { n_train: 1000, ..small_cfg() };
    let (train, _, corpus) = gen_multihop(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let ds_path = dir.path().join("train.jsonl");
    save_dataset(&ds_path, &train).unwrap();
    let loaded = load_dataset(&ds_path).unwrap();
    assert_eq!(loaded, train);

    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus(&corpus_path, &corpus).unwrap();
    assert_eq!(load_corpus(&corpus_path).unwrap(), corpus);
}

#[test]
fn empty_dataset_is_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    let ds = Dataset { kind: "train".into(), gen_config: small_cfg(), examples: vec![] };
    save_dataset(&path, &ds).unwrap();
    let loaded = load_dataset(&path).unwrap();
    assert!(loaded.examples.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1, "header line only");
}

#[test]
fn truncated_record_reports_line_numbers() {
    let cfg = GenConfig { n_train: 10, ..small_cfg() };
    let (train, _, _) = gen_multihop(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_dataset(&path, &train).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = lines[5];
    let truncated = &cut[..cut.len() / 2];
    lines[5] = truncated;
    std::fs::write(&path, lines.join("\n")).unwrap();

    match load_dataset(&path) {
        Err(DataFileError::BadRecord { line, last_good, .. }) => {
            assert_eq!(line, 6);
            assert_eq!(last_good, 5);
        }
        other => panic!("expected BadRecord, got {other:?}"),
    }
}

#[test]
fn version_mismatch_is_rejected() {
    let cfg = GenConfig { n_train: 2, ..small_cfg() };
    let (train, _, _) = gen_multihop(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_dataset(&path, &train).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
    assert_ne!(text, bumped);
    std::fs::write(&path, bumped).unwrap();
    assert!(matches!(load_dataset(&path), Err(DataFileError::WrongVersion { version: 9 })));
}
