//! Distortion, classification and perception terms, and the composite training losses.
//!
//! Batches are flat slices of `n * sample_len` values. The neural trainer evaluates its
//! networks itself and feeds the resulting scores and norms into the `*_from_*`
//! reductions here, so the reported numbers share one definition.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::datamodel::{Mode, Objective, TradeoffParams};
use crate::{Error, Result};

/// Floor applied to the true-class probability before taking its logarithm.
pub const CE_PROB_FLOOR: f64 = 1e-12;

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean squared error over all batch entries.
pub fn distortion(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_len(x.len(), xhat.len())?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Mean cross-entropy in nats. `clamped` is set when some true-class probability fell
/// below [`CE_PROB_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: bool,
}

/// Mean over the batch of `-ln p[true label]`; `probs` is `labels.len() x classes`.
pub fn ce_loss(labels: &[usize], probs: &[f64], classes: usize) -> Result<CrossEntropy> {
    check_len(labels.len() * classes, probs.len())?;
    let mut clamped = false;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument("label out of range"));
        }
        let p = probs[i * classes + label];
        if p < CE_PROB_FLOOR {
            clamped = true;
        }
        total -= libm::log(p.max(CE_PROB_FLOOR));
    }
    let value = if labels.is_empty() { 0.0 } else { total / labels.len() as f64 };
    Ok(CrossEntropy { value, clamped })
}

/// Fraction of rows whose arg-max class equals the label.
pub fn accuracy(labels: &[usize], probs: &[f64], classes: usize) -> Result<f64> {
    check_len(labels.len() * classes, probs.len())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &probs[i * classes..(i + 1) * classes];
            argmax(row) == label
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// A scalar score function over single samples with an input gradient.
pub trait Critic {
    fn score(&self, x: &[f64]) -> f64;
    fn input_gradient(&self, x: &[f64], grad: &mut [f64]);
}

/// `mean(real) - mean(fake)`: the duality-gap estimate of W1.
pub fn w1_proxy_from_scores(real: &[f64], fake: &[f64]) -> f64 {
    mean(real) - mean(fake)
}

fn scores<C: Critic + ?Sized>(critic: &C, batch: &[f64], sample_len: usize) -> Result<Vec<f64>> {
    if sample_len == 0 || !batch.len().is_multiple_of(sample_len) {
        return Err(Error::InvalidArgument("batch length is not a multiple of sample_len"));
    }
    Ok(batch.chunks(sample_len).map(|s| critic.score(s)).collect())
}

/// Critic-based W1 estimate between a real and a reconstructed batch.
pub fn w1_proxy<C: Critic + ?Sized>(
    critic: &C,
    real: &[f64],
    fake: &[f64],
    sample_len: usize,
) -> Result<f64> {
    Ok(w1_proxy_from_scores(
        &scores(critic, real, sample_len)?,
        &scores(critic, fake, sample_len)?,
    ))
}

/// `lambda_gp * mean((||grad|| - 1)^2)` from per-sample input-gradient norms.
pub fn gradient_penalty_from_norms(norms: &[f64], lambda_gp: f64) -> f64 {
    lambda_gp * mean(&norms.iter().map(|n| (n - 1.0) * (n - 1.0)).collect::<Vec<_>>())
}

/// Components of the critic's minimization objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLoss {
    /// `mean(fake) - mean(real)`.
    pub score_gap: f64,
    /// `lambda_gp * mean((||grad h(x~)|| - 1)^2)` over interpolates.
    pub penalty: f64,
    pub total: f64,
}

impl CriticLoss {
    pub fn from_parts(real_scores: &[f64], fake_scores: &[f64], norms: &[f64], lambda_gp: f64) -> Self {
        let score_gap = -w1_proxy_from_scores(real_scores, fake_scores);
        let penalty = gradient_penalty_from_norms(norms, lambda_gp);
        Self {
            score_gap,
            penalty,
            total: score_gap + penalty,
        }
    }
}

/// Gradient-penalized critic objective with one interpolation weight
/// `eps ~ U[0, 1]` per sample: `x~ = eps x + (1 - eps) x^`.
pub fn critic_loss<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    real: &[f64],
    fake: &[f64],
    sample_len: usize,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    check_len(real.len(), fake.len())?;
    let real_scores = scores(critic, real, sample_len)?;
    let fake_scores = scores(critic, fake, sample_len)?;
    let mut interp = vec![0.0; sample_len];
    let mut grad = vec![0.0; sample_len];
    let norms: Vec<f64> = real
        .chunks(sample_len)
        .zip(fake.chunks(sample_len))
        .map(|(r, f)| {
            let eps: f64 = rng.gen_range(0.0..=1.0);
            for ((t, a), b) in interp.iter_mut().zip(r).zip(f) {
                *t = eps * a + (1.0 - eps) * b;
            }
            critic.input_gradient(&interp, &mut grad);
            libm::sqrt(grad.iter().map(|g| g * g).sum())
        })
        .collect();
    Ok(CriticLoss::from_parts(&real_scores, &fake_scores, &norms, lambda_gp))
}

/// Per-batch loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub mse: f64,
    pub ce: f64,
    pub w1_term: f64,
}

impl LossTerms {
    /// Evaluates the terms from raw batches; pass empty `labels` when no classifier is
    /// involved and empty score slices when no critic is.
    pub fn from_batches(
        x: &[f64],
        xhat: &[f64],
        labels: &[usize],
        probs: &[f64],
        classes: usize,
        real_scores: &[f64],
        fake_scores: &[f64],
    ) -> Result<Self> {
        let mse = distortion(x, xhat)?;
        let ce = if labels.is_empty() {
            0.0
        } else {
            ce_loss(labels, probs, classes)?.value
        };
        let w1_term = if fake_scores.is_empty() {
            0.0
        } else {
            w1_proxy_from_scores(real_scores, fake_scores)
        };
        Ok(Self { mse, ce, w1_term })
    }
}

/// Weighted training loss of one batch. Inactive terms are carried as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
    pub w1_term: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub objective: Objective,
    pub mode: Mode,
}

/// `mse + lambda_c * ce` (rdc) or `mse + lambda_p * w1` (rdp).
///
/// Universal runs use the same functional form with their own weights; the mode is only
/// recorded.
pub fn composite_loss(
    objective: Objective,
    mode: Mode,
    terms: LossTerms,
    tradeoff: TradeoffParams,
) -> Result<LossBreakdown> {
    let TradeoffParams { lambda_c, lambda_p } = tradeoff;
    let consistent = match objective {
        Objective::Rdc => lambda_p == 0.0,
        Objective::Rdp => lambda_c == 0.0,
    };
    if !consistent || lambda_c < 0.0 || lambda_p < 0.0 {
        return Err(Error::InconsistentTradeoff {
            objective: objective.as_str(),
            lambda_c,
            lambda_p,
        });
    }
    let (ce, w1_term) = match objective {
        Objective::Rdc => (terms.ce, 0.0),
        Objective::Rdp => (0.0, terms.w1_term),
    };
    Ok(LossBreakdown {
        total: terms.mse + lambda_c * ce + lambda_p * w1_term,
        mse: terms.mse,
        ce,
        w1_term,
        lambda_c,
        lambda_p,
        objective,
        mode,
    })
}
