//! Prompt-softmax quality score, correlation metrics, the PLCC training loss
//! and logistic fitting of predictions to MOS.

mod logistic;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::numerics::layers::cosine_rows;
use crate::numerics::ops::cosine_similarity;
use crate::numerics::{NumericsError, Scalar, Session, Var};

pub use logistic::{logistic_fit, LogisticFit, LogisticParams, MAX_ITERATIONS, TOLERANCE};
pub use metrics::{average_ranks, plcc, plcc_loss, plcc_loss_graph, srocc, VARIANCE_EPS};

pub const DEFAULT_POSITIVE_PROMPT: &str = "high quality";
pub const DEFAULT_NEGATIVE_PROMPT: &str = "low quality";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("correlation needs at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("prediction and ground-truth lengths differ ({pred} vs {gt})")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("degenerate variance: predictions or ground truth are constant")]
    DegenerateVariance,
    #[error("logistic fit did not converge in {iterations} iterations (sse {sse})")]
    NoConvergence { iterations: usize, sse: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Paired predictions and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBatch {
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(pred: Vec<f64>, gt: Vec<f64>) -> Result<Self, ScoringError> {
        if pred.len() != gt.len() {
            return Err(ScoringError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        if pred.len() < 2 {
            return Err(ScoringError::TooFew(pred.len()));
        }
        if let Some(i) = pred.iter().chain(&gt).position(|v| !v.is_finite()) {
            return Err(ScoringError::NonFinite(i % pred.len()));
        }
        Ok(Self { pred, gt })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }
}

/// `(τ·cos(f, t⁺), τ·cos(f, t⁻))`.
pub fn prompt_similarity<T: Scalar>(fused: &[T], pos: &[T], neg: &[T], tau: f64) -> Result<(f64, f64), NumericsError> {
    Ok((
        tau * cosine_similarity(fused, pos)?.f64(),
        tau * cosine_similarity(fused, neg)?.f64(),
    ))
}

/// Two-way softmax `e^{s⁺} / (e^{s⁺} + e^{s⁻})`.
pub fn quality_score(s_pos: f64, s_neg: f64) -> f64 {
    let d = s_pos - s_neg;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityPrediction {
    pub q_pre: f64,
    pub s_pos: f64,
    pub s_neg: f64,
}

impl QualityPrediction {
    pub fn from_similarities(s_pos: f64, s_neg: f64) -> Self {
        Self {
            q_pre: quality_score(s_pos, s_neg),
            s_pos,
            s_neg,
        }
    }

    pub fn score<T: Scalar>(fused: &[T], pos: &[T], neg: &[T], tau: f64) -> Result<Self, NumericsError> {
        let (p, n) = prompt_similarity(fused, pos, neg, tau)?;
        Ok(Self::from_similarities(p, n))
    }
}

/// Graph outputs of [`prompt_scores`], each `N×1`.
#[derive(Clone, Copy, Debug)]
pub struct PromptScores {
    pub s_pos: Var,
    pub s_neg: Var,
    pub q_pre: Var,
}

/// Differentiable prompt similarities and quality score of `fused: N×D`
/// against `pos`, `neg`: `1×D`.
pub fn prompt_scores<T: Scalar>(s: &mut Session<T>, fused: Var, pos: Var, neg: Var, tau: f64) -> Result<PromptScores, NumericsError> {
    let sp = cosine_rows(s, fused, pos)?;
    let sp = s.graph.scale(sp, T::of(tau))?;
    let sn = cosine_rows(s, fused, neg)?;
    let sn = s.graph.scale(sn, T::of(tau))?;
    // The two-way softmax is the logistic of the difference.
    let d = s.graph.sub(sp, sn)?;
    let q = s.graph.sigmoid(d)?;
    Ok(PromptScores {
        s_pos: sp,
        s_neg: sn,
        q_pre: q,
    })
}
