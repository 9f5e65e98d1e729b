//! Frame-level cross-entropy, the epoch schedule of the combined-feature
//! weight, and the weighted total loss.
//!
//! The total loss is `alpha * L_av + (1 - alpha) * L_v`, where `L_av` scores
//! the audio-visual head, `L_v` the visual-only head, and
//! `alpha = min(1, 0.5 + (epoch - 1) / 60)`.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::sigmoid;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
/// Initial weight of the audio-visual loss.
pub const ALPHA0: f64 = 0.5;
/// Per-epoch increment of the audio-visual weight.
pub const ALPHA_STEP: f64 = 1.0 / 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub epoch: usize,
    /// Weight of the audio-visual loss; the visual loss gets `1 - alpha`.
    pub alpha: f64,
}

impl LossWeights {
    pub fn at(epoch: i64) -> Result<Self> {
        Ok(Self {
            epoch: epoch as usize,
            alpha: alpha_at(epoch)?,
        })
    }

    pub fn visual(&self) -> f64 {
        1.0 - self.alpha
    }
}

pub fn alpha_at(epoch: i64) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::BadEpoch(epoch));
    }
    Ok((ALPHA0 + ALPHA_STEP * (epoch - 1) as f64).min(1.0))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over the frames of one sequence.
pub fn frame_ce(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptySequence);
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / probs.len() as f64)
}

fn check_lengths(a: &[f64], b: &[f64], labels: &[u8]) -> Result<()> {
    if a.len() != labels.len() || b.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: a.len().max(b.len()),
            right: labels.len(),
        });
    }
    Ok(())
}

/// Weighted loss of both heads on one sequence of logits.
pub fn total_loss(logits_av: &[f64], logits_v: &[f64], labels: &[u8], epoch: i64) -> Result<f64> {
    let alpha = alpha_at(epoch)?;
    check_lengths(logits_av, logits_v, labels)?;
    let p_av: Vec<f64> = logits_av.iter().map(|&z| sigmoid_scalar(z)).collect();
    let p_v: Vec<f64> = logits_v.iter().map(|&z| sigmoid_scalar(z)).collect();
    Ok(alpha * frame_ce(&p_av, labels)? + (1.0 - alpha) * frame_ce(&p_v, labels)?)
}

/// Analytic gradient of [`total_loss`] with respect to both logit vectors.
pub fn total_loss_grad(
    logits_av: &[f64],
    logits_v: &[f64],
    labels: &[u8],
    epoch: i64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let alpha = alpha_at(epoch)?;
    check_lengths(logits_av, logits_v, labels)?;
    if labels.is_empty() {
        return Err(Error::EmptySequence);
    }
    let t = labels.len() as f64;
    // d/dz of -(y ln p + (1-y) ln(1-p)) is p - y inside the clamp, 0 outside.
    let grad = |z: f64, y: u8, w: f64| {
        let p = sigmoid_scalar(z);
        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
            0.0
        } else {
            w * (p - y as f64) / t
        }
    };
    let g_av = logits_av.iter().zip(labels).map(|(&z, &y)| grad(z, y, alpha)).collect();
    let g_v = logits_v.iter().zip(labels).map(|(&z, &y)| grad(z, y, 1.0 - alpha)).collect();
    Ok((g_av, g_v))
}

/// Differentiable per-clip cross-entropy on `(N, T)` logits, averaged over
/// frames and then over clips. `labels` is `(N, T)` with 0/1 entries.
pub fn frame_ce_tensor(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, t) = logits.dims2()?;
    if t == 0 || n == 0 {
        return Err(Error::EmptySequence);
    }
    if labels.dims() != logits.dims() {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let p = sigmoid(logits)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = (1.0 - &p)?;
    let one_minus_y = (1.0 - labels)?;
    let ll = ((labels * p.log()?)? + (one_minus_y * one_minus_p.log()?)?)?;
    Ok(ll.mean(1)?.mean(0)?.neg()?)
}

/// `alpha * CE(av) + (1 - alpha) * CE(visual)` for a batch.
pub fn total_loss_tensor(logits_av: &Tensor, logits_v: &Tensor, labels: &Tensor, epoch: i64) -> Result<Tensor> {
    let alpha = alpha_at(epoch)?;
    let l_av = frame_ce_tensor(logits_av, labels)?;
    let l_v = frame_ce_tensor(logits_v, labels)?;
    Ok(((l_av * alpha)? + (l_v * (1.0 - alpha))?)?)
}
