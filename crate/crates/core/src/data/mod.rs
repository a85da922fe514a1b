//! Synthetic multi-hop retrieval task.
//!
//! The world is a random cyclic successor order over a set of key tokens. A
//! chain is a window of H+1 consecutive keys `k_1 -> k_2 -> ... -> k_{H+1}`
//! on that cycle. Each example asks for the document holding the *final*
//! key of its chain, given a query that only mentions the *first* key:
//!
//! - query: `k_1` plus noise tokens (the final key never appears here)
//! - rationale: one segment per hop, segment i spelling the link
//!   `[k_i, k_{i+1}, SEG]`
//! - positive document: `k_{H+1}` plus noise (one shared document per chain)
//! - hard negatives: documents holding `k_1` or an intermediate key --
//!   lexically close to the query but wrong
//!
//! Surface matching therefore retrieves hard negatives; only following the
//! links reaches the positive. Eval chains start at held-out cycle
//! positions: no eval (start, final) pairing ever occurs in training, and
//! eval final keys are never training final keys, while every individual
//! link of an eval chain still appears inside training rationales through
//! window overlap -- so the association is learnable but the answer is not
//! memorizable.

mod batch;
mod io;

pub use batch::{make_batch, Batch, BatchError};
pub use io::{load_corpus, load_dataset, save_corpus, save_dataset, DataFileError, DATA_FORMAT, DATA_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{FIRST_FREE_TOKEN, SEG};

/// How the rationale is split into segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStyle {
    /// One segment per hop: `[k_i, k_{i+1}, SEG]`.
    PerHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub vocab_size: usize,
    /// Number of key tokens forming the successor cycle.
    pub n_keys: usize,
    /// Chain length H (number of links to follow).
    pub hops: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Held-out chains the eval split draws from.
    pub n_eval_chains: usize,
    pub corpus_size: usize,
    /// Noise tokens per document.
    pub distractors_per_doc: usize,
    /// Noise tokens per query.
    pub query_noise: usize,
    pub hard_negs_per_example: usize,
    /// Budget for queries and documents (token count, before control tokens).
    pub max_seq_tokens: usize,
    /// Budget for the full rationale-augmented input.
    pub max_explicit_tokens: usize,
    pub seed: u64,
    pub segment_style: SegmentStyle,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab_size: 512,
            n_keys: 256,
            hops: 2,
            n_train: 2000,
            n_eval: 200,
            n_eval_chains: 64,
            corpus_size: 1000,
            distractors_per_doc: 7,
            query_noise: 5,
            hard_negs_per_example: 1,
            max_seq_tokens: 30,
            max_explicit_tokens: 64,
            seed: 0,
            segment_style: SegmentStyle::PerHop,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("vocab_size {vocab} leaves no noise tokens after {keys} keys and the reserved ids")]
    NoNoiseTokens { vocab: usize, keys: usize },
    #[error("hops must be at least 1")]
    NoHops,
    #[error("n_keys {keys} cannot hold {chains} held-out chains of stride {stride} (need n_keys >= n_eval_chains * (hops + 1))")]
    EvalChainsDontFit { keys: usize, chains: usize, stride: usize },
    #[error("query of {len} tokens exceeds max_seq_tokens {max}")]
    QueryBudget { len: usize, max: usize },
    #[error("document of {len} tokens exceeds max_seq_tokens {max}")]
    DocBudget { len: usize, max: usize },
    #[error("explicit input of {len} tokens exceeds max_explicit_tokens {max}")]
    ExplicitBudget { len: usize, max: usize },
    #[error("corpus_size {size} is too small for {needed} positives and hard negatives")]
    CorpusTooSmall { size: usize, needed: usize },
    #[error("n_eval_chains must be at least 1 when n_eval > 0")]
    NoEvalChains,
}

/// One training or eval example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: Vec<u32>,
    /// Rationale split into M segments, one per hop.
    pub segments: Vec<Vec<u32>>,
    pub positive: Vec<u32>,
    pub hard_negatives: Vec<Vec<u32>>,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub hops: usize,
    /// The ground-truth key chain `k_1..k_{H+1}`.
    pub chain: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: String,
    pub gen_config: GenConfig,
    pub examples: Vec<TrainingExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub gen_config: GenConfig,
    pub docs: Vec<CorpusDoc>,
}

impl Corpus {
    /// Index from document content to doc_id. Content is unique by
    /// construction; duplicates would make relevance ambiguous.
    pub fn content_index(&self) -> std::collections::HashMap<&[u32], &str> {
        let mut map = std::collections::HashMap::new();
        for d in &self.docs {
            map.insert(d.tokens.as_slice(), d.doc_id.as_str());
        }
        map
    }
}

/// The successor world the generator draws chains from; reconstructible
/// from the config alone, which is how the symbolic oracle sees it.
pub struct ChainWorld {
    /// Keys in cycle order.
    cycle: Vec<u32>,
    /// Cycle position of each key id.
    pos: std::collections::HashMap<u32, usize>,
    n_keys: usize,
}

impl ChainWorld {
    pub fn from_config(cfg: &GenConfig) -> Self {
        // Sub-stream 0 of the seed; example noise uses separate sub-streams
        // so the world is independent of example counts.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        let mut cycle: Vec<u32> =
            (0..cfg.n_keys as u32).map(|i| FIRST_FREE_TOKEN + i).collect();
        cycle.shuffle(&mut rng);
        let pos = cycle.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        ChainWorld { cycle, pos, n_keys: cfg.n_keys }
    }

    pub fn is_key(&self, token: u32) -> bool {
        self.pos.contains_key(&token)
    }

    /// Successor of a key on the cycle.
    pub fn next_key(&self, key: u32) -> u32 {
        let p = self.pos[&key];
        self.cycle[(p + 1) % self.n_keys]
    }

    /// The chain starting at cycle position `start`.
    fn chain_at(&self, start: usize, hops: usize) -> Vec<u32> {
        (0..=hops).map(|j| self.cycle[(start + j) % self.n_keys]).collect()
    }
}

/// Follow the chain links from the single key mentioned in a query.
/// Returns the final key after `hops` steps, or None if the query does not
/// contain exactly one key token.
pub fn solve_query(world: &ChainWorld, query: &[u32], hops: usize) -> Option<u32> {
    let keys: Vec<u32> = query.iter().copied().filter(|&t| world.is_key(t)).collect();
    if keys.len() != 1 {
        return None;
    }
    let mut k = keys[0];
    for _ in 0..hops {
        k = world.next_key(k);
    }
    Some(k)
}

fn validate(cfg: &GenConfig) -> Result<(), GenError> {
    if cfg.hops == 0 {
        return Err(GenError::NoHops);
    }
    if cfg.vocab_size <= FIRST_FREE_TOKEN as usize + cfg.n_keys {
        return Err(GenError::NoNoiseTokens { vocab: cfg.vocab_size, keys: cfg.n_keys });
    }
    if cfg.n_eval > 0 && cfg.n_eval_chains == 0 {
        return Err(GenError::NoEvalChains);
    }
    let stride = cfg.hops + 1;
    if cfg.n_eval_chains * stride > cfg.n_keys {
        return Err(GenError::EvalChainsDontFit {
            keys: cfg.n_keys,
            chains: cfg.n_eval_chains,
            stride,
        });
    }
    let query_len = 1 + cfg.query_noise;
    if query_len > cfg.max_seq_tokens {
        return Err(GenError::QueryBudget { len: query_len, max: cfg.max_seq_tokens });
    }
    let doc_len = 1 + cfg.distractors_per_doc;
    if doc_len > cfg.max_seq_tokens {
        return Err(GenError::DocBudget { len: doc_len, max: cfg.max_seq_tokens });
    }
    let explicit_len = 2 + query_len + cfg.hops * 3;
    if explicit_len > cfg.max_explicit_tokens {
        return Err(GenError::ExplicitBudget { len: explicit_len, max: cfg.max_explicit_tokens });
    }
    Ok(())
}

struct NoisePool {
    first: u32,
    count: usize,
}

impl NoisePool {
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
        (0..n).map(|_| self.first + rng.gen_range(0..self.count) as u32).collect()
    }
}

/// Key plus noise, key at a random position.
fn doc_with_key(rng: &mut ChaCha8Rng, key: u32, noise: &NoisePool, noise_count: usize) -> Vec<u32> {
    let mut tokens = noise.draw(rng, noise_count);
    let at = rng.gen_range(0..=tokens.len());
    tokens.insert(at, key);
    tokens
}

fn build_example(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    chain: &[u32],
    positive: Vec<u32>,
) -> TrainingExample {
    let noise = noise_pool(cfg);
    let query = doc_with_key(rng, chain[0], &noise, cfg.query_noise);

    let SegmentStyle::PerHop = cfg.segment_style;
    let segments: Vec<Vec<u32>> =
        (0..cfg.hops).map(|i| vec![chain[i], chain[i + 1], SEG]).collect();

    let mut hard_negatives = Vec::with_capacity(cfg.hard_negs_per_example);
    for _ in 0..cfg.hard_negs_per_example {
        // The trap key is the query key or an intermediate chain key; never
        // the final key, so hard negatives are always genuinely wrong.
        let trap = chain[rng.gen_range(0..cfg.hops)];
        hard_negatives.push(doc_with_key(rng, trap, &noise, cfg.distractors_per_doc));
    }

    let example = TrainingExample {
        query,
        segments,
        positive,
        hard_negatives,
        meta: ExampleMeta { hops: cfg.hops, chain: chain.to_vec() },
    };
    debug_assert!(example_satisfies_ground_truth(&example), "generated example violates the ground-truth property");
    example
}

fn noise_pool(cfg: &GenConfig) -> NoisePool {
    let first = FIRST_FREE_TOKEN + cfg.n_keys as u32;
    NoisePool { first, count: cfg.vocab_size - first as usize }
}

/// The ground-truth property every example must satisfy: the final chain
/// key appears in the positive and in the last rationale segment, but not
/// in the query; the positive differs from every hard negative.
pub fn example_satisfies_ground_truth(ex: &TrainingExample) -> bool {
    let final_key = *ex.meta.chain.last().unwrap();
    ex.positive.contains(&final_key)
        && ex.segments.last().map(|s| s.contains(&final_key)).unwrap_or(false)
        && !ex.query.contains(&final_key)
        && !ex.segments.is_empty()
        && ex.hard_negatives.iter().all(|h| h != &ex.positive)
}

/// Generate the train split, eval split, and retrieval corpus.
///
/// Pure function of the config (seed included). The corpus holds every
/// positive document, the eval hard negatives, and noise-only distractor
/// documents up to `corpus_size`; each eval chain's final key appears in
/// exactly one corpus document.
pub fn gen_multihop(cfg: &GenConfig) -> Result<(Dataset, Dataset, Corpus), GenError> {
    validate(cfg)?;
    let world = ChainWorld::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2));
    let noise = noise_pool(cfg);

    // Held-out chain starts, evenly strided around the cycle so every eval
    // link still occurs inside training windows.
    let stride = cfg.n_keys / cfg.n_eval_chains.max(1);
    let eval_starts: Vec<usize> =
        (0..cfg.n_eval_chains).map(|i| i * stride).collect();
    let eval_start_set: std::collections::HashSet<usize> = eval_starts.iter().copied().collect();
    let train_starts: Vec<usize> =
        (0..cfg.n_keys).filter(|p| !eval_start_set.contains(p)).collect();

    // One shared positive document per chain prevents near-duplicate
    // positives from poisoning in-batch negatives.
    let mut positive_of: std::collections::HashMap<usize, Vec<u32>> = Default::default();
    let mut positive_for = |rng: &mut ChaCha8Rng, start: usize, world: &ChainWorld| -> Vec<u32> {
        if let Some(doc) = positive_of.get(&start) {
            return doc.clone();
        }
        let chain = world.chain_at(start, cfg.hops);
        let doc = doc_with_key(rng, *chain.last().unwrap(), &noise, cfg.distractors_per_doc);
        positive_of.insert(start, doc.clone());
        doc
    };

    let mut train_examples = Vec::with_capacity(cfg.n_train);
    let mut used_train_starts = Vec::new();
    for _ in 0..cfg.n_train {
        let start = train_starts[rng.gen_range(0..train_starts.len())];
        used_train_starts.push(start);
        let chain = world.chain_at(start, cfg.hops);
        let positive = positive_for(&mut rng, start, &world);
        train_examples.push(build_example(&mut rng, cfg, &chain, positive));
    }

    let mut eval_examples = Vec::with_capacity(cfg.n_eval);
    for i in 0..cfg.n_eval {
        let start = eval_starts[i % eval_starts.len()];
        let chain = world.chain_at(start, cfg.hops);
        let positive = positive_for(&mut rng, start, &world);
        eval_examples.push(build_example(&mut rng, cfg, &chain, positive));
    }

    // Corpus: all positives, eval hard negatives, then noise distractors.
    let mut contents: Vec<Vec<u32>> = Vec::new();
    let mut seen: std::collections::HashSet<Vec<u32>> = Default::default();
    let push_doc = |contents: &mut Vec<Vec<u32>>, seen: &mut std::collections::HashSet<Vec<u32>>, tokens: Vec<u32>| {
        if seen.insert(tokens.clone()) {
            contents.push(tokens);
        }
    };
    let mut chain_starts: Vec<usize> = positive_of.keys().copied().collect();
    chain_starts.sort_unstable();
    for start in chain_starts {
        push_doc(&mut contents, &mut seen, positive_of[&start].clone());
    }
    for ex in &eval_examples {
        for hn in &ex.hard_negatives {
            push_doc(&mut contents, &mut seen, hn.clone());
        }
    }
    let needed = contents.len();
    if cfg.corpus_size < needed {
        return Err(GenError::CorpusTooSmall { size: cfg.corpus_size, needed });
    }
    while contents.len() < cfg.corpus_size {
        let filler = noise.draw(&mut rng, 1 + cfg.distractors_per_doc);
        push_doc(&mut contents, &mut seen, filler);
    }
    contents.shuffle(&mut rng);
    let docs: Vec<CorpusDoc> = contents
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| CorpusDoc { doc_id: format!("d{i:06}"), tokens })
        .collect();

    let train = Dataset { kind: "train".into(), gen_config: cfg.clone(), examples: train_examples };
    let eval = Dataset { kind: "eval".into(), gen_config: cfg.clone(), examples: eval_examples };
    let corpus = Corpus { gen_config: cfg.clone(), docs };
    Ok((train, eval, corpus))
}

#[cfg(test)]
mod tests;
