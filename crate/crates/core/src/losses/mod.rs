//! Training objectives: contrastive losses for both views, output-level
//! score distillation, and trajectory alignment between latent states and
//! temporally downsampled explicit segment states.
//!
//! Every score in every loss is a cosine similarity: operands arrive L2
//! normalized from the encoder exits, so plain dot products are cosines and
//! the 0.02 temperatures are meaningful.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat_rows, Scalar, Tensor};

/// Loss weighting and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the explicit-view contrastive loss.
    pub lambda1: f64,
    /// Weight of the output-level distillation loss.
    pub lambda2: f64,
    /// Weight of the trajectory-alignment loss.
    pub lambda3: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Distillation temperature (shared by both KD losses).
    pub tau_kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 10.0, lambda3: 0.1, tau: 0.02, tau_kd: 0.02 }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss term {term} is non-finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("lambda weights must be nonnegative")]
    NegativeWeight,
    #[error("temperatures must be positive (tau {tau}, tau_kd {tau_kd})")]
    BadTemperature { tau: f64, tau_kd: f64 },
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(LossError::NegativeWeight);
        }
        if !(self.tau > 0.0) || !(self.tau_kd > 0.0) {
            return Err(LossError::BadTemperature { tau: self.tau, tau_kd: self.tau_kd });
        }
        Ok(())
    }
}

/// Candidate documents for one batch: positives, hard negatives, and the
/// in-batch pool, as unit rows of a single matrix.
pub struct CandidateSet<S: Scalar> {
    /// `[B x m]`, unit rows.
    pub docs: Tensor<S>,
    /// Per-query index of the positive document in `docs`.
    pub positive: Vec<usize>,
}

impl<S: Scalar> CandidateSet<S> {
    pub fn new(docs: Tensor<S>, positive: Vec<usize>) -> Self {
        let b = docs.rows();
        assert!(b > 0, "candidate set must be nonempty");
        for &p in &positive {
            assert!(p < b, "positive index {p} out of range for {b} candidates");
        }
        debug_assert!(
            {
                let v = docs.values();
                let c = docs.cols();
                (0..b).all(|i| {
                    let norm: f64 =
                        v[i * c..(i + 1) * c].iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
                    (norm - 1.0).abs() < 1e-5
                })
            },
            "candidate rows must be unit-norm within 1e-5"
        );
        CandidateSet { docs, positive }
    }

    /// Number of candidate documents B.
    pub fn len(&self) -> usize {
        self.docs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.rows() == 0
    }
}

/// InfoNCE for one query against the candidate set:
/// `-log( exp(<q, d+>/tau) / sum_d exp(<q, d>/tau) )`, computed through
/// log-sum-exp.
pub fn info_nce<S: Scalar>(
    q_vec: &Tensor<S>,
    candidates: &CandidateSet<S>,
    query_idx: usize,
    tau: S,
) -> Tensor<S> {
    assert!(tau > S::ZERO, "info_nce requires tau > 0");
    assert!(!candidates.is_empty(), "info_nce requires a nonempty candidate set");
    assert!(
        query_idx < candidates.positive.len(),
        "query index {query_idx} out of range for {} positives",
        candidates.positive.len()
    );
    let pos = candidates.positive[query_idx];
    let scores = q_vec.matmul(&candidates.docs.transpose()).scale(S::ONE / tau);
    let lse = scores.logsumexp_rows();
    let positive = scores.slice_cols(pos, 1);
    lse.sub(&positive)
}

/// Batch-level InfoNCE: mean of the per-query losses in index order.
pub fn info_nce_batch<S: Scalar>(
    q_vecs: &[Tensor<S>],
    candidates: &CandidateSet<S>,
    tau: S,
) -> Tensor<S> {
    assert!(!q_vecs.is_empty(), "info_nce_batch requires at least one query");
    let per_query: Vec<Tensor<S>> = q_vecs
        .iter()
        .enumerate()
        .map(|(i, q)| info_nce(q, candidates, i, tau))
        .collect();
    concat_rows(&per_query).mean_rows()
}

/// KL divergence between two explicit distributions (rows summing to one).
pub fn kl_div<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Tensor<S> {
    for (name, t) in [("p", p), ("q", q)] {
        let v = t.values();
        let c = t.cols();
        for r in 0..t.rows() {
            let sum: f64 = v[r * c..(r + 1) * c].iter().map(|x| x.to_f64()).sum();
            assert!(
                (sum - 1.0).abs() < 1e-5,
                "kl_div requires {name} rows to sum to 1 within 1e-5, row {r} sums to {sum}"
            );
        }
    }
    crate::autodiff::kl_div(p, q)
}

/// KL alignment between teacher and student score rows:
/// `mean_r KL( softmax(t_r / tau) || softmax(s_r / tau) )`.
///
/// Computed through log-softmax so underflow at sharp temperatures cannot
/// produce zero denominators. With `detach_teacher` the teacher rows are
/// cut from the gradient graph, so only the student side (and anything
/// upstream of it) learns from this term.
pub fn score_distribution_kl<S: Scalar>(
    teacher_scores: &Tensor<S>,
    student_scores: &Tensor<S>,
    tau_kd: S,
    detach_teacher: bool,
) -> Tensor<S> {
    assert!(tau_kd > S::ZERO, "score_distribution_kl requires tau_kd > 0");
    assert_eq!(
        teacher_scores.shape(),
        student_scores.shape(),
        "teacher and student score shapes differ: {:?} vs {:?}",
        teacher_scores.shape(),
        student_scores.shape()
    );
    let rows = teacher_scores.rows();
    assert!(rows > 0 && teacher_scores.cols() > 0, "score rows must be nonempty");

    let teacher = if detach_teacher { teacher_scores.detach() } else { teacher_scores.clone() };
    let t_scaled = teacher.scale(S::ONE / tau_kd);
    let s_scaled = student_scores.scale(S::ONE / tau_kd);
    let p = t_scaled.softmax_rows(S::ONE);
    let log_p = t_scaled.log_softmax_rows();
    let log_q = s_scaled.log_softmax_rows();
    let per_entry = p.mul(&log_p.sub(&log_q));
    per_entry.sum_all().scale(S::ONE / S::from_f64(rows as f64))
}

/// Output-level distillation for one query:
/// `KL( softmax(v*.V_D / tau_kd) || softmax(v.V_D / tau_kd) )`.
pub fn kd_output<S: Scalar>(
    teacher_q: &Tensor<S>,
    student_q: &Tensor<S>,
    candidates: &CandidateSet<S>,
    tau_kd: S,
    detach_teacher: bool,
) -> Tensor<S> {
    assert!(!candidates.is_empty(), "kd_output requires a nonempty candidate set");
    let docs_t = candidates.docs.transpose();
    let teacher_scores = teacher_q.matmul(&docs_t);
    let student_scores = student_q.matmul(&docs_t);
    score_distribution_kl(&teacher_scores, &student_scores, tau_kd, detach_teacher)
}

/// Temporal downsampling map: `j_i = floor(i * M / K)` for `i = 1..=K`,
/// clamped into `[1, M]` (1-based; repeats appear when M < K).
pub fn downsample_indices(m: usize, k: usize) -> Vec<usize> {
    assert!(m >= 1 && k >= 1, "downsample_indices requires M >= 1 and K >= 1");
    (1..=k).map(|i| (i * m / k).clamp(1, m)).collect()
}

/// Trajectory alignment: average KL between the score distributions of
/// temporally downsampled teacher segment states and the latent states.
/// Both sides are L2-normalized before scoring.
pub fn kd_trajectory<S: Scalar>(
    teacher_states: &Tensor<S>,
    student_states: &[Tensor<S>],
    candidates: &CandidateSet<S>,
    tau_kd: S,
    detach_teacher: bool,
) -> Tensor<S> {
    let m_count = teacher_states.rows();
    let k_count = student_states.len();
    assert!(m_count >= 1, "kd_trajectory requires at least one teacher state");
    assert!(k_count >= 1, "kd_trajectory requires at least one student state");
    let dim = candidates.docs.cols();
    assert_eq!(
        teacher_states.cols(),
        dim,
        "teacher state dimension {} does not match document dimension {dim}",
        teacher_states.cols()
    );
    for s in student_states {
        assert_eq!(
            s.cols(),
            dim,
            "student state dimension {} does not match document dimension {dim}",
            s.cols()
        );
    }

    let picks: Vec<usize> = downsample_indices(m_count, k_count).iter().map(|j| j - 1).collect();
    let teacher = teacher_states.gather_rows(&picks).l2_normalize_rows();
    let student = concat_rows(student_states).l2_normalize_rows();

    let docs_t = candidates.docs.transpose();
    let teacher_scores = teacher.matmul(&docs_t);
    let student_scores = student.matmul(&docs_t);
    score_distribution_kl(&teacher_scores, &student_scores, tau_kd, detach_teacher)
}

/// The four loss terms of one step, prior to weighting. Absent terms come
/// from ablation flags and contribute exactly zero.
pub struct LossTerms<S: Scalar> {
    pub cl_latent: Tensor<S>,
    pub cl_explicit: Option<Tensor<S>>,
    pub kd_out: Option<Tensor<S>>,
    pub kd_mid: Option<Tensor<S>>,
}

/// Weighted total `cl_latent + l1 * cl_explicit + l2 * kd_out + l3 * kd_mid`.
///
/// Rejects non-finite terms, naming the offender, so a diverged step can be
/// aborted without touching parameters.
pub fn total_loss<S: Scalar>(terms: &LossTerms<S>, w: &LossWeights) -> Result<Tensor<S>, LossError> {
    w.validate()?;
    let check = |name: &'static str, t: &Tensor<S>| -> Result<(), LossError> {
        let v = t.item().to_f64();
        if v.is_finite() {
            Ok(())
        } else {
            Err(LossError::NonFinite { term: name, value: v })
        }
    };

    check("cl_latent", &terms.cl_latent)?;
    let mut total = terms.cl_latent.clone();
    if let Some(t) = &terms.cl_explicit {
        check("cl_explicit", t)?;
        total = total.add(&t.scale(S::from_f64(w.lambda1)));
    }
    if let Some(t) = &terms.kd_out {
        check("kd_out", t)?;
        total = total.add(&t.scale(S::from_f64(w.lambda2)));
    }
    if let Some(t) = &terms.kd_mid {
        check("kd_mid", t)?;
        total = total.add(&t.scale(S::from_f64(w.lambda3)));
    }
    Ok(total)
}

/// Per-term values of one training step, for logging and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cl_latent: f64,
    pub cl_explicit: f64,
    pub kd_out: f64,
    pub kd_mid: f64,
    pub total: f64,
}
