//! Soft pseudo-labels for target samples: confidence gating followed by
//! temperature sharpening, and the soft cross-entropy self-training loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::models::{ModelBundle, ModelError};
use crate::objective::soft_cross_entropy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("sharpening alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("invalid sharpen config: {0}")]
    Config(String),
    #[error("probability vector is empty")]
    Empty,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpenConfig {
    /// Softness in `(0, 1]`; smaller is sharper.
    pub alpha: f64,
    /// Minimum pre-sharpening max probability for a label to be used.
    pub threshold: f64,
    /// `false` replaces the sharpened distribution with its argmax one-hot.
    pub soft: bool,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            threshold: 0.3,
            soft: true,
        }
    }
}

impl SharpenConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(LabelError::Config(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(LabelError::Config(format!(
                "threshold must be in [0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPseudoLabel {
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub accepted: bool,
}

/// `p^(1/alpha)` renormalized, evaluated in log space.
pub fn sharpen(p: &[f64], alpha: f64) -> Result<Vec<f64>, LabelError> {
    if !(alpha > 0.0) {
        return Err(LabelError::Alpha(alpha));
    }
    if p.is_empty() {
        return Err(LabelError::Empty);
    }
    let logs: Vec<f64> = p
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v.ln() / alpha
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pseudo-labels from class probabilities (one row per target sample).
pub fn pseudo_labels_from_probs(
    probs: &[Vec<f64>],
    cfg: &SharpenConfig,
) -> Result<Vec<SoftPseudoLabel>, LabelError> {
    probs
        .iter()
        .map(|p| {
            let confidence = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let probs = if cfg.soft {
                sharpen(p, cfg.alpha)?
            } else {
                let k = p.iter().position(|&v| v == confidence).unwrap_or(0);
                let mut one = vec![0.0; p.len()];
                one[k] = 1.0;
                one
            };
            Ok(SoftPseudoLabel {
                probs,
                confidence,
                accepted: confidence >= cfg.threshold,
            })
        })
        .collect()
}

/// Labels for a target batch from the current model; nothing is recorded.
pub fn pseudo_label_batch(
    model: &ModelBundle,
    target: &Tensor,
    cfg: &SharpenConfig,
) -> Result<Vec<SoftPseudoLabel>, LabelError> {
    let logits = model.classify(&target.detach())?;
    let probs: Vec<Vec<f64>> = (0..logits.rows())
        .map(|i| softmax_row(logits.row(i)))
        .collect();
    pseudo_labels_from_probs(&probs, cfg)
}

/// Mean soft cross-entropy of `logits` (rows of the accepted samples, in
/// order) against the labels; exactly zero when nothing is accepted.
pub fn label_loss(
    tape: &Tape,
    logits: Option<&Tensor>,
    labels: &[&SoftPseudoLabel],
) -> Result<Tensor, LabelError> {
    let Some(logits) = logits else {
        return Ok(Tensor::scalar(0.0));
    };
    if labels.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let rows: Vec<&[f64]> = labels.iter().map(|l| l.probs.as_slice()).collect();
    let targets = Tensor::from_rows(&rows)?;
    Ok(soft_cross_entropy(tape, logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_one_is_identity() {
        let p = [0.1, 0.6, 0.3];
        let s = sharpen(&p, 1.0).unwrap();
        for (a, b) in p.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_stays_uniform() {
        for alpha in [0.01, 0.3, 1.0] {
            let s = sharpen(&[0.25; 4], alpha).unwrap();
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn square_sharpening_matches_hand_value() {
        let s = sharpen(&[0.7, 0.3], 0.5).unwrap();
        assert!((s[0] - 0.49 / 0.58).abs() < 1e-12);
        assert!((s[1] - 0.09 / 0.58).abs() < 1e-12);
    }

    #[test]
    fn sharpen_rejects_nonpositive_alpha() {
        assert_eq!(sharpen(&[0.5, 0.5], 0.0), Err(LabelError::Alpha(0.0)));
    }

    #[test]
    fn gating() {
        let probs = vec![vec![0.25, 0.25, 0.25, 0.25], vec![0.2, 0.2, 0.6]];
        let cfg = SharpenConfig {
            threshold: 0.7,
            ..Default::default()
        };
        assert!(pseudo_labels_from_probs(&probs, &cfg)
            .unwrap()
            .iter()
            .all(|l| !l.accepted));
        let cfg = SharpenConfig {
            threshold: 0.0,
            ..Default::default()
        };
        assert!(pseudo_labels_from_probs(&probs, &cfg)
            .unwrap()
            .iter()
            .all(|l| l.accepted));
    }

    #[test]
    fn one_hot_prediction_is_its_own_label() {
        let l = &pseudo_labels_from_probs(&[vec![0.0, 1.0, 0.0]], &SharpenConfig::default())
            .unwrap()[0];
        assert_eq!(l.probs, vec![0.0, 1.0, 0.0]);
        assert_eq!(l.confidence, 1.0);
        assert!(l.accepted);
    }

    #[test]
    fn hard_labels_are_one_hot() {
        let cfg = SharpenConfig {
            soft: false,
            ..Default::default()
        };
        let l = &pseudo_labels_from_probs(&[vec![0.3, 0.5, 0.2]], &cfg).unwrap()[0];
        assert_eq!(l.probs, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_zero_cases() {
        let tape = Tape::new();
        assert_eq!(label_loss(&tape, None, &[]).unwrap().item(), 0.0);
        // one-hot label, logits strongly agreeing -> loss ~ 0
        let lab = SoftPseudoLabel {
            probs: vec![1.0, 0.0],
            confidence: 1.0,
            accepted: true,
        };
        let logits = Tensor::matrix(1, 2, vec![40.0, -40.0]).unwrap();
        assert!(label_loss(&tape, Some(&logits), &[&lab]).unwrap().item() < 1e-30);
    }

    #[test]
    fn uniform_label_lower_bound_is_ln_c() {
        let tape = Tape::new();
        let c = 4;
        let lab = SoftPseudoLabel {
            probs: vec![0.25; c],
            confidence: 0.25,
            accepted: true,
        };
        let at_uniform = label_loss(&tape, Some(&Tensor::zeros(&[1, c])), &[&lab])
            .unwrap()
            .item();
        assert!((at_uniform - (c as f64).ln()).abs() < 1e-12);
        let skewed = Tensor::matrix(1, c, vec![2.0, -1.0, 0.5, 0.0]).unwrap();
        assert!(label_loss(&tape, Some(&skewed), &[&lab]).unwrap().item() > at_uniform);
    }
}
