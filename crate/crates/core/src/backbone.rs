//! Tiny causal transformer shared by every encoding pathway.
//!
//! Pre-norm residual blocks with RMS normalization, learned absolute
//! position embeddings added to the input, no biases, no dropout. The only
//! architectural property the rest of the crate relies on is causal
//! attention with an appendable key/value cache: soft latent tokens are fed
//! back one row at a time and must see exactly the prefix they extend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat_cols, concat_rows, Graph, Scalar, Tensor};

/// Reserved token ids, present in every vocabulary.
pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const INSTR: u32 = 2;
pub const SEG: u32 = 3;
/// First id available to task vocabularies.
pub const FIRST_FREE_TOKEN: u32 = 4;

/// Epsilon inside the RMS normalization.
pub const RMS_EPS: f64 = 1e-6;
/// Additive mask value for future positions.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_mult: usize,
    pub max_seq_len: usize,
    /// Separate, larger budget for rationale-augmented inputs.
    pub max_explicit_len: usize,
    pub tie_lm_head: bool,
    /// Softmax temperature used when forming soft latent tokens.
    pub soft_temperature: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 512,
            model_dim: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_mult: 4,
            max_seq_len: 128,
            max_explicit_len: 64,
            tie_lm_head: true,
            soft_temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("vocab_size {0} must be at least {FIRST_FREE_TOKEN} to hold the reserved special tokens")]
    VocabTooSmall(usize),
    #[error("model_dim {dim} must be divisible by n_heads {heads}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("n_heads must be at least 1")]
    NoHeads,
    #[error("mlp_mult must be at least 1")]
    NoMlp,
    #[error("max_seq_len must be at least 1")]
    NoContext,
    #[error("max_explicit_len {explicit} must not exceed max_seq_len {max}")]
    ExplicitBudget { explicit: usize, max: usize },
    #[error("soft_temperature must be positive, got {0}")]
    BadSoftTemperature(f64),
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vocab_size < FIRST_FREE_TOKEN as usize {
            return Err(ConfigError::VocabTooSmall(self.vocab_size));
        }
        if self.n_heads == 0 {
            return Err(ConfigError::NoHeads);
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(ConfigError::HeadSplit { dim: self.model_dim, heads: self.n_heads });
        }
        if self.mlp_mult == 0 {
            return Err(ConfigError::NoMlp);
        }
        if self.max_seq_len == 0 {
            return Err(ConfigError::NoContext);
        }
        if self.max_explicit_len > self.max_seq_len {
            return Err(ConfigError::ExplicitBudget {
                explicit: self.max_explicit_len,
                max: self.max_seq_len,
            });
        }
        if !(self.soft_temperature > 0.0) {
            return Err(ConfigError::BadSoftTemperature(self.soft_temperature));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.mlp_mult
    }

    /// Closed-form parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let m = self.model_dim;
        let per_layer = 2 * m + 4 * m * m + 2 * m * self.mlp_dim();
        let lm = if self.tie_lm_head { 0 } else { m * self.vocab_size };
        self.vocab_size * m + self.max_seq_len * m + self.n_layers * per_layer + m + lm
    }
}

/// One named parameter matrix.
#[derive(Debug, Clone)]
pub struct ParamTensor<S: Scalar> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerLayout>,
    final_norm: usize,
    lm_head: Option<usize>,
}

/// Parameter set of the transformer. Immutable during inference; the
/// trainer mutates values only between steps.
#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    cfg: BackboneConfig,
    params: Vec<ParamTensor<S>>,
    layout: Layout,
}

fn normal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<S> {
    // Box-Muller; one fresh pair of uniforms per sample keeps the stream
    // layout independent of tensor sizes.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            S::from_f64(z * std)
        })
        .collect()
}

/// Deterministically initialize a backbone from its config seed.
///
/// Projections draw from N(0, 0.02^2); the residual-writing projections
/// (`wo`, `w2`) are further scaled by 1/sqrt(2 * n_layers); norm gains
/// start at one.
pub fn init_backbone<S: Scalar>(cfg: &BackboneConfig) -> Result<Backbone<S>, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.model_dim;
    let mlp = cfg.mlp_dim();
    let residual_scale = if cfg.n_layers > 0 { 1.0 / (2.0 * cfg.n_layers as f64).sqrt() } else { 1.0 };

    let mut params: Vec<ParamTensor<S>> = Vec::new();
    let push = |params: &mut Vec<ParamTensor<S>>, name: String, rows: usize, cols: usize, data: Vec<S>| {
        params.push(ParamTensor { name, rows, cols, data });
        params.len() - 1
    };

    let tok = push(&mut params, "embed.tok".into(), cfg.vocab_size, m, normal(&mut rng, cfg.vocab_size * m, 0.02));
    let pos = push(&mut params, "embed.pos".into(), cfg.max_seq_len, m, normal(&mut rng, cfg.max_seq_len * m, 0.02));

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let attn_norm = push(&mut params, format!("layer{l}.attn.norm"), 1, m, vec![S::ONE; m]);
        let wq = push(&mut params, format!("layer{l}.attn.wq"), m, m, normal(&mut rng, m * m, 0.02));
        let wk = push(&mut params, format!("layer{l}.attn.wk"), m, m, normal(&mut rng, m * m, 0.02));
        let wv = push(&mut params, format!("layer{l}.attn.wv"), m, m, normal(&mut rng, m * m, 0.02));
        let wo = push(&mut params, format!("layer{l}.attn.wo"), m, m, normal(&mut rng, m * m, 0.02 * residual_scale));
        let mlp_norm = push(&mut params, format!("layer{l}.mlp.norm"), 1, m, vec![S::ONE; m]);
        let w1 = push(&mut params, format!("layer{l}.mlp.w1"), m, mlp, normal(&mut rng, m * mlp, 0.02));
        let w2 = push(&mut params, format!("layer{l}.mlp.w2"), mlp, m, normal(&mut rng, mlp * m, 0.02 * residual_scale));
        layers.push(LayerLayout { attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2 });
    }

    let final_norm = push(&mut params, "final.norm".into(), 1, m, vec![S::ONE; m]);
    let lm_head = if cfg.tie_lm_head {
        None
    } else {
        Some(push(&mut params, "lm_head".into(), m, cfg.vocab_size, normal(&mut rng, m * cfg.vocab_size, 0.02)))
    };

    Ok(Backbone { cfg: cfg.clone(), params, layout: Layout { tok, pos, layers, final_norm, lm_head } })
}

impl<S: Scalar> Backbone<S> {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[ParamTensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Bind the parameters into a graph as leaf tensors. With
    /// `trainable = true` the leaves accumulate gradients, indexed in the
    /// same order as [`Backbone::params`].
    pub fn bind(&self, g: &Graph<S>, trainable: bool) -> BoundBackbone<S> {
        let tensors: Vec<Tensor<S>> = self
            .params
            .iter()
            .map(|p| g.tensor(p.rows, p.cols, &p.data, trainable))
            .collect();
        let lm = match self.layout.lm_head {
            Some(i) => tensors[i].clone(),
            None => tensors[self.layout.tok].transpose(),
        };
        BoundBackbone {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            tensors,
            lm,
        }
    }
}

/// Per-layer key/value sequences accumulated across incremental forwards.
pub struct AttnCache<S: Scalar> {
    layers: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    cached_len: usize,
}

impl<S: Scalar> AttnCache<S> {
    pub fn new(n_layers: usize) -> Self {
        AttnCache { layers: vec![None; n_layers], cached_len: 0 }
    }

    pub fn cached_len(&self) -> usize {
        self.cached_len
    }
}

/// A backbone bound to one graph for a single forward/backward episode.
pub struct BoundBackbone<S: Scalar> {
    cfg: BackboneConfig,
    layout: Layout,
    tensors: Vec<Tensor<S>>,
    /// LM head matrix `[m x vocab]`; the transposed embedding when tied.
    lm: Tensor<S>,
}

impl<S: Scalar> BoundBackbone<S> {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Parameter leaves in `Backbone::params` order.
    pub fn param_tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn embedding(&self) -> &Tensor<S> {
        &self.tensors[self.layout.tok]
    }

    pub fn fresh_cache(&self) -> AttnCache<S> {
        AttnCache::new(self.cfg.n_layers)
    }

    /// Token-id lookup into the embedding matrix; row i equals E[ids[i]].
    pub fn embed_tokens(&self, ids: &[u32]) -> Tensor<S> {
        for &id in ids {
            assert!(
                (id as usize) < self.cfg.vocab_size,
                "token id {id} out of range for vocab size {}",
                self.cfg.vocab_size
            );
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.tensors[self.layout.tok].gather_rows(&idx)
    }

    /// Causal forward pass over `x` (one row per position). With a cache,
    /// rows are treated as positions `cached_len..cached_len + L` and the
    /// cache is extended; hidden state i depends only on rows `0..=i` and
    /// the cached prefix.
    pub fn forward(&self, x: &Tensor<S>, cache: Option<&mut AttnCache<S>>) -> Tensor<S> {
        let mut scratch = self.fresh_cache();
        let cache = match cache {
            Some(c) => c,
            None => &mut scratch,
        };
        let seq_len = x.rows();
        let offset = cache.cached_len;
        assert_eq!(x.cols(), self.cfg.model_dim, "forward expects {} columns, got {}", self.cfg.model_dim, x.cols());
        assert!(
            offset + seq_len <= self.cfg.max_seq_len,
            "sequence overflow: cached {offset} + new {seq_len} exceeds max_seq_len {}",
            self.cfg.max_seq_len
        );
        let g = x.graph();
        let hd = self.cfg.head_dim();
        let eps = S::from_f64(RMS_EPS);

        let pos_idx: Vec<usize> = (offset..offset + seq_len).collect();
        let pos = self.tensors[self.layout.pos].gather_rows(&pos_idx);
        let mut h = x.add(&pos);

        // One causal mask shared by all layers: row i may attend to
        // absolute positions 0..=offset+i.
        let total = offset + seq_len;
        let mask = if seq_len > 1 {
            let mut mv = vec![S::ZERO; seq_len * total];
            for i in 0..seq_len {
                for j in (offset + i + 1)..total {
                    mv[i * total + j] = S::from_f64(MASK_NEG);
                }
            }
            Some(g.constant(seq_len, total, &mv))
        } else {
            None
        };
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());

        for (l, layer) in self.layout.layers.iter().enumerate() {
            let normed = h.rms_norm(&self.tensors[layer.attn_norm], eps);
            let q = normed.matmul(&self.tensors[layer.wq]);
            let k_new = normed.matmul(&self.tensors[layer.wk]);
            let v_new = normed.matmul(&self.tensors[layer.wv]);

            let (k_all, v_all) = match cache.layers[l].take() {
                Some((k_old, v_old)) => (
                    concat_rows(&[k_old, k_new]),
                    concat_rows(&[v_old, v_new]),
                ),
                None => (k_new, v_new),
            };

            let mut head_ctx = Vec::with_capacity(self.cfg.n_heads);
            for head in 0..self.cfg.n_heads {
                let qh = q.slice_cols(head * hd, hd);
                let kh = k_all.slice_cols(head * hd, hd);
                let vh = v_all.slice_cols(head * hd, hd);
                let mut scores = qh.matmul(&kh.transpose()).scale(scale);
                if let Some(mask) = &mask {
                    scores = scores.add(mask);
                }
                let attn = scores.softmax_rows(S::ONE);
                head_ctx.push(attn.matmul(&vh));
            }
            let ctx = if head_ctx.len() == 1 { head_ctx.pop().unwrap() } else { concat_cols(&head_ctx) };
            h = h.add(&ctx.matmul(&self.tensors[layer.wo]));

            let normed2 = h.rms_norm(&self.tensors[layer.mlp_norm], eps);
            let mlp = normed2.matmul(&self.tensors[layer.w1]).silu().matmul(&self.tensors[layer.w2]);
            h = h.add(&mlp);

            cache.layers[l] = Some((k_all, v_all));
        }

        cache.cached_len += seq_len;
        h.rms_norm(&self.tensors[self.layout.final_norm], eps)
    }

    /// Project hidden states to vocabulary logits: `h . W_lm`
    /// (`h . E^T` when the head is tied).
    pub fn lm_logits(&self, h: &Tensor<S>) -> Tensor<S> {
        assert_eq!(
            h.cols(),
            self.cfg.model_dim,
            "lm_logits expects {} columns, got {}",
            self.cfg.model_dim,
            h.cols()
        );
        h.matmul(&self.lm)
    }
}
