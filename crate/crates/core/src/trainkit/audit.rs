//! Full-pipeline gradient audit at 64-bit precision.
//!
//! Builds a micro model and a two-example batch with all four loss terms
//! active, then compares the backward pass of the total loss against
//! central finite differences over every backbone parameter.

use crate::autodiff::{grad_check, GradCheckParam, GradCheckReport, Graph};
use crate::backbone::{init_backbone, Backbone, BackboneConfig};
use crate::data::{gen_multihop, make_batch, GenConfig, SegmentStyle};
use crate::trainkit::{compute_batch_loss, DocMode, TrainConfig};

/// Micro sizes: 8-dim model, 1 layer, batch of 2, K = 2 thinking steps,
/// M = 3 rationale segments.
pub fn micro_audit_backbone(seed: u64) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 48,
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_mult: 4,
        max_seq_len: 32,
        max_explicit_len: 32,
        tie_lm_head: true,
        soft_temperature: 1.0,
        seed,
    }
}

pub fn micro_audit_gen(seed: u64) -> GenConfig {
    GenConfig {
        vocab_size: 48,
        n_keys: 24,
        hops: 3,
        n_train: 4,
        n_eval: 2,
        n_eval_chains: 2,
        corpus_size: 16,
        distractors_per_doc: 3,
        query_noise: 3,
        hard_negs_per_example: 1,
        max_seq_tokens: 8,
        max_explicit_tokens: 32,
        seed,
        segment_style: SegmentStyle::PerHop,
    }
}

pub fn micro_audit_train() -> TrainConfig {
    // Teacher detachment deliberately hides the teacher pathway from the
    // backward pass while the loss value still depends on it, so a central
    // difference would disagree by construction. The audit therefore runs
    // with detachment off; the detachment contract itself is covered by
    // the zero-teacher-gradient test in the losses module.
    TrainConfig {
        batch_size: 2,
        k_train: 2,
        doc_mode: DocMode::Latent,
        detach_teacher: false,
        ..TrainConfig::default()
    }
}

/// Audit the total-loss gradient on the micro configuration. Returns the
/// max relative error against central differences with the given step.
pub fn full_loss_grad_audit(seed: u64, fd_step: f64) -> GradCheckReport {
    let backbone: Backbone<f64> =
        init_backbone(&micro_audit_backbone(seed)).expect("micro backbone config is valid");
    let (train, _, _) = gen_multihop(&micro_audit_gen(seed)).expect("micro gen config is valid");
    let train_cfg = micro_audit_train();
    let batch =
        make_batch(&train, &[0, 1], train_cfg.hard_negs_per_query).expect("micro batch assembles");

    let g = Graph::new();
    let bound = backbone.bind(&g, true);
    let (total, _) = compute_batch_loss(&bound, &batch, &train_cfg).expect("micro loss is finite");
    total.backward();

    let mut params: Vec<GradCheckParam> = backbone
        .params()
        .iter()
        .zip(bound.param_tensors().iter())
        .map(|(p, t)| GradCheckParam::new(p.name.clone(), p.data.clone(), t.grad()))
        .collect();

    let eval = {
        let backbone = backbone.clone();
        let batch = batch.clone();
        let train_cfg = train_cfg.clone();
        move |ps: &[GradCheckParam]| {
            let mut probe = backbone.clone();
            for (i, p) in ps.iter().enumerate() {
                probe.params_mut()[i].data.copy_from_slice(&p.values);
            }
            let g = Graph::new();
            let bound = probe.bind(&g, false);
            let (total, _) = compute_batch_loss(&bound, &batch, &train_cfg)
                .expect("perturbed micro loss stays finite");
            total.item()
        }
    };
    grad_check(eval, &mut params, fd_step)
}
