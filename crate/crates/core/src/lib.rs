//! Desk-scale dual-view self-distillation for dense retrieval.
//!
//! A tiny causal transformer learns to "think" in continuous latent tokens:
//! during training an explicit view encodes queries together with ground-truth
//! reasoning paths and acts as the teacher, while the latent view generates a
//! short sequence of soft thinking tokens and is aligned to the teacher at
//! both the output and trajectory level. At inference only the latent view
//! runs, so query latency stays close to a plain dense encoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`] — dense 2-D tensors with reverse-mode differentiation
//! - [`backbone`] — the shared causal transformer
//! - [`encoder`] — plain, latent, and explicit encoding pathways
//! - [`losses`] — contrastive and distillation objectives
//! - [`data`] — synthetic multi-hop task generator and dataset I/O
//! - [`trainkit`] — AdamW, schedule, training loop, checkpoints
//! - [`eval`] — retrieval metrics, evaluation, latency benchmarks

pub mod autodiff;
pub mod backbone;
pub mod encoder;
pub mod eval;
pub mod data;
pub mod losses;
pub mod trainkit;
