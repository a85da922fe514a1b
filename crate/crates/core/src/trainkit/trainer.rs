//! Dual-view training loop.
//!
//! Each step encodes the batch documents once, runs the latent view (and,
//! unless ablated, the explicit view) over every query, combines the four
//! objectives, backpropagates, and applies one AdamW update under the
//! warmup/decay schedule. All randomness derives from (seed, epoch), so a
//! fixed seed gives a bitwise-reproducible loss curve and a resumed run
//! replays the straight run exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat_rows, Graph, Scalar, Tensor};
use crate::backbone::{Backbone, BackboneConfig, BoundBackbone};
use crate::data::{make_batch, Batch, BatchError, Dataset};
use crate::encoder::{encode_explicit, encode_latent, encode_plain, EncodeError, ExplicitEncoding};
use crate::losses::{
    info_nce_batch, kd_output, kd_trajectory, total_loss, CandidateSet, LossError, LossReport,
    LossTerms, LossWeights,
};

use super::adamw::{adamw_step, AdamWConfig, OptimError, OptimizerState};
use super::checkpoint::Checkpoint;
use super::schedule::lr_schedule;

/// How documents are encoded during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocMode {
    /// Same latent-thinking procedure as queries (same K).
    Latent,
    /// Single forward pass; kept for ablation.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Latent thinking steps K during training.
    pub k_train: usize,
    pub hard_negs_per_query: usize,
    pub weights: LossWeights,
    pub adamw: AdamWConfig,
    /// Drop the teacher pathway entirely (contrastive-only latent training).
    pub disable_explicit_view: bool,
    /// Replace latent thinking with a plain single-pass encoder; the KD
    /// terms are forced off because no trajectory exists.
    pub disable_latent_view: bool,
    pub disable_kd_out: bool,
    pub disable_kd_mid: bool,
    /// Cut gradients into the teacher through the KD terms.
    pub detach_teacher: bool,
    pub doc_mode: DocMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_ratio: 0.1,
            epochs: 1,
            batch_size: 8,
            k_train: 3,
            hard_negs_per_query: 1,
            weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
            disable_explicit_view: false,
            disable_latent_view: false,
            disable_kd_out: false,
            disable_kd_mid: false,
            detach_teacher: true,
            doc_mode: DocMode::Latent,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Step(#[from] TrainStepError),
}

#[derive(Debug, Error)]
pub enum TrainStepError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl TrainStepError {
    /// A non-finite loss or gradient: the step is abandoned with parameters
    /// untouched, but the run may continue.
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainStepError::Loss(LossError::NonFinite { .. }))
            || matches!(self, TrainStepError::Optim(OptimError::NonFiniteGrad { .. }))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Config(format!(
                "warmup_ratio must lie in [0, 1], got {}",
                self.warmup_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.k_train == 0 && !self.disable_latent_view {
            return Err(TrainError::Config("k_train must be at least 1 unless the latent view is disabled".into()));
        }
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Forward pass and loss assembly for one batch on an already-bound
/// backbone. Shared by the trainer and the gradient audit.
pub fn compute_batch_loss<S: Scalar>(
    bb: &BoundBackbone<S>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(Tensor<S>, LossReport), TrainStepError> {
    let tau = S::from_f64(cfg.weights.tau);
    let tau_kd = S::from_f64(cfg.weights.tau_kd);
    let latent_live = !cfg.disable_latent_view;
    let docs_plain = !latent_live || matches!(cfg.doc_mode, DocMode::Plain);

    // Documents are encoded once and shared by all four terms.
    let doc_vecs: Vec<Tensor<S>> = batch
        .docs
        .iter()
        .map(|d| {
            if docs_plain {
                encode_plain(bb, d)
            } else {
                encode_latent(bb, d, cfg.k_train).map(|e| e.v)
            }
        })
        .collect::<Result<_, _>>()?;
    let candidates = CandidateSet::new(concat_rows(&doc_vecs), batch.positive.clone());

    let mut student = Vec::with_capacity(batch.examples.len());
    let mut trajectories = Vec::with_capacity(batch.examples.len());
    for ex in &batch.examples {
        if latent_live {
            let enc = encode_latent(bb, &ex.query, cfg.k_train)?;
            student.push(enc.v);
            trajectories.push(enc.trajectory);
        } else {
            student.push(encode_plain(bb, &ex.query)?);
        }
    }
    let cl_latent = info_nce_batch(&student, &candidates, tau);

    let mut cl_explicit = None;
    let mut kd_out = None;
    let mut kd_mid = None;
    if !cfg.disable_explicit_view {
        let encs: Vec<ExplicitEncoding<S>> = batch
            .examples
            .iter()
            .map(|ex| encode_explicit(bb, &ex.query, &ex.segments))
            .collect::<Result<_, _>>()?;
        let teacher: Vec<Tensor<S>> = encs.iter().map(|e| e.v_star.clone()).collect();
        cl_explicit = Some(info_nce_batch(&teacher, &candidates, tau));

        if latent_live && !cfg.disable_kd_out {
            let per: Vec<Tensor<S>> = teacher
                .iter()
                .zip(student.iter())
                .map(|(t, s)| kd_output(t, s, &candidates, tau_kd, cfg.detach_teacher))
                .collect();
            kd_out = Some(concat_rows(&per).mean_rows());
        }
        if latent_live && !cfg.disable_kd_mid {
            let per: Vec<Tensor<S>> = encs
                .iter()
                .zip(trajectories.iter())
                .map(|(e, traj)| {
                    kd_trajectory(&e.segment_states, traj, &candidates, tau_kd, cfg.detach_teacher)
                })
                .collect();
            kd_mid = Some(concat_rows(&per).mean_rows());
        }
    }

    let terms = LossTerms { cl_latent, cl_explicit, kd_out, kd_mid };
    let total = total_loss(&terms, &cfg.weights)?;
    let report = LossReport {
        cl_latent: terms.cl_latent.item().to_f64(),
        cl_explicit: terms.cl_explicit.as_ref().map_or(0.0, |t| t.item().to_f64()),
        kd_out: terms.kd_out.as_ref().map_or(0.0, |t| t.item().to_f64()),
        kd_mid: terms.kd_mid.as_ref().map_or(0.0, |t| t.item().to_f64()),
        total: total.item().to_f64(),
    };
    Ok((total, report))
}

/// Owns the model, optimizer state, and step counters for one run.
pub struct Trainer {
    pub backbone: Backbone<f32>,
    pub optimizer: OptimizerState<f32>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub total_steps: u64,
    /// Steps whose update was abandoned because the loss diverged.
    pub aborted_steps: Vec<u64>,
}

impl Trainer {
    pub fn new(backbone: Backbone<f32>, cfg: TrainConfig, n_examples: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let steps_per_epoch = n_examples / cfg.batch_size;
        if steps_per_epoch == 0 {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds dataset size {n_examples}",
                cfg.batch_size
            )));
        }
        let optimizer = OptimizerState::new(backbone.params(), cfg.adamw);
        let total_steps = (cfg.epochs * steps_per_epoch) as u64;
        Ok(Trainer { backbone, optimizer, cfg, step: 0, total_steps, aborted_steps: Vec::new() })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Trainer {
            backbone: ckpt.backbone,
            optimizer: ckpt.optimizer,
            cfg: ckpt.train_config,
            step: ckpt.step,
            total_steps: ckpt.total_steps,
            aborted_steps: Vec::new(),
        }
    }

    pub fn checkpoint(&self, backbone_config: &BackboneConfig) -> Checkpoint {
        Checkpoint {
            backbone_config: backbone_config.clone(),
            train_config: self.cfg.clone(),
            step: self.step,
            opt_step: self.optimizer.step,
            total_steps: self.total_steps,
            backbone: self.backbone.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Run until `until` (or the end of the schedule), appending one log
    /// entry per completed step.
    pub fn run(&mut self, dataset: &Dataset, until: Option<u64>) -> Result<Vec<StepLog>, TrainError> {
        let stop = until.unwrap_or(self.total_steps).min(self.total_steps);
        let steps_per_epoch = (dataset.examples.len() / self.cfg.batch_size) as u64;
        let mut logs = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        let mut order_epoch = u64::MAX;

        while self.step < stop {
            let epoch = self.step / steps_per_epoch;
            if epoch != order_epoch {
                order = epoch_order(dataset.examples.len(), self.cfg.seed, epoch);
                order_epoch = epoch;
            }
            let pos = (self.step % steps_per_epoch) as usize;
            let indices = &order[pos * self.cfg.batch_size..(pos + 1) * self.cfg.batch_size];
            let batch = make_batch(dataset, indices, self.cfg.hard_negs_per_query)?;
            let lr_t = lr_schedule(self.step, self.total_steps, self.cfg.warmup_ratio, self.cfg.lr);

            match self.step_once(&batch, lr_t) {
                Ok(report) => logs.push(StepLog { step: self.step, lr: lr_t, losses: report }),
                Err(e) if e.is_divergence() => {
                    log::error!("step {}: {e}; update abandoned, parameters untouched", self.step);
                    self.aborted_steps.push(self.step);
                }
                Err(e) => return Err(e.into()),
            }
            self.step += 1;
        }
        Ok(logs)
    }

    fn step_once(&mut self, batch: &Batch, lr_t: f64) -> Result<LossReport, TrainStepError> {
        let g = Graph::new();
        let bb = self.backbone.bind(&g, true);
        let (total, report) = compute_batch_loss(&bb, batch, &self.cfg)?;
        total.backward();
        let grads: Vec<Vec<f32>> = bb.param_tensors().iter().map(|t| t.grad()).collect();
        adamw_step(self.backbone.params_mut(), &grads, &mut self.optimizer, lr_t)?;
        Ok(report)
    }
}

/// Example order for one epoch; a pure function of (n, seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch + 1).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
