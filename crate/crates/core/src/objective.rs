//! Supervised source loss, entropy-conditioned adversarial loss and the
//! assembled training objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("label smoothing needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("epsilon must be in [0, 1), got {0}")]
    Epsilon(f64),
    #[error("{0} weights given for {1} rows")]
    Weights(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub epsilon: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { epsilon: 0.2 }
    }
}

/// `(1 - eps)` on `y`, `eps / (C - 1)` elsewhere.
pub fn smooth_labels(y: usize, classes: usize, epsilon: f64) -> Result<Vec<f64>, ObjectiveError> {
    if classes < 2 {
        return Err(ObjectiveError::TooFewClasses(classes));
    }
    if y >= classes {
        return Err(ObjectiveError::Label { label: y, classes });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ObjectiveError::Epsilon(epsilon));
    }
    let off = epsilon / (classes - 1) as f64;
    let mut v = vec![off; classes];
    v[y] = 1.0 - epsilon;
    Ok(v)
}

/// Mean over rows of `-sum_c target_c * log_softmax(logits)_c`.
pub fn soft_cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    targets: &Tensor,
) -> Result<Tensor, AutodiffError> {
    let ls = tape.log_softmax(logits)?;
    let s = tape.sum(&tape.mul(&ls, targets)?)?;
    tape.scale(&s, -1.0 / logits.rows() as f64)
}

/// Soft cross-entropy on the selected source rows; zero when none are selected.
pub fn supervised_loss(
    tape: &Tape,
    logits: Option<&Tensor>,
    smoothed: &[Vec<f64>],
) -> Result<Tensor, ObjectiveError> {
    match logits {
        Some(l) if !smoothed.is_empty() => {
            Ok(soft_cross_entropy(tape, l, &Tensor::from_rows(smoothed)?)?)
        }
        _ => Ok(Tensor::scalar(0.0)),
    }
}

/// Shannon entropy (nats).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `1 + exp(-H(pred))`.
pub fn entropy_weight(pred: &[f64]) -> f64 {
    1.0 + (-entropy(pred)).exp()
}

/// Weighted binary cross-entropy of `sigmoid(logits)` (`n x 1`) against soft
/// targets in `[0, 1]`, as `sum_i w_i * bce_i`.
///
/// Uses `log_softmax([z, 0])` for `(ln sigmoid(z), ln(1 - sigmoid(z)))`.
pub fn weighted_bce(
    tape: &Tape,
    logits: &Tensor,
    targets: &[f64],
    weights: &[f64],
) -> Result<Tensor, ObjectiveError> {
    let n = logits.rows();
    if targets.len() != n || weights.len() != n {
        return Err(ObjectiveError::Weights(weights.len().min(targets.len()), n));
    }
    let pair = tape.matmul(logits, &Tensor::matrix(1, 2, vec![1.0, 0.0])?)?;
    let logp = tape.log_softmax(&pair)?;
    let coef: Vec<f64> = targets
        .iter()
        .zip(weights)
        .flat_map(|(&t, &w)| [-w * t, -w * (1.0 - t)])
        .collect();
    Ok(tape.sum(&tape.mul(&logp, &Tensor::matrix(n, 2, coef)?)?)?)
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Per-side weights for the adversarial loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntropyWeights {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

/// Entropy-conditioned domain loss. Discriminator logits are `D(grl(G(x)))`
/// for the selected source rows (domain 1) and the target rows (domain 0).
/// Each side's weights are normalized to sum to one; the result is the mean
/// over the non-empty sides.
pub fn adv_loss(
    tape: &Tape,
    source_logits: Option<&Tensor>,
    target_logits: Option<&Tensor>,
    weights: &EntropyWeights,
) -> Result<Tensor, ObjectiveError> {
    let mut sides = vec![];
    if let Some(s) = source_logits {
        let w = normalized(&weights.source);
        sides.push(weighted_bce(tape, s, &vec![1.0; s.rows()], &w)?);
    }
    if let Some(t) = target_logits {
        let w = normalized(&weights.target);
        sides.push(weighted_bce(tape, t, &vec![0.0; t.rows()], &w)?);
    }
    match sides.as_slice() {
        [] => Ok(Tensor::scalar(0.0)),
        [one] => Ok(one.clone()),
        [a, b] => Ok(tape.scale(&tape.add(a, b)?, 0.5)?),
        _ => unreachable!(),
    }
}

/// Probability of class `j` for each row, as plain values.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let p = tape
        .exp(&tape.log_softmax(&logits.detach()).expect("matrix"))
        .expect("finite");
    (0..p.rows()).map(|i| p.row(i).to_vec()).collect()
}

/// Per-term multipliers; all default to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub sup: f64,
    pub adv: f64,
    pub select: f64,
    pub label: f64,
    pub mix_cls: f64,
    pub mix_dom: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            sup: 1.0,
            adv: 1.0,
            select: 1.0,
            label: 1.0,
            mix_cls: 1.0,
            mix_dom: 1.0,
        }
    }
}

/// The six loss terms of one step, still on the tape.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub sup: Tensor,
    pub adv: Tensor,
    pub select: Tensor,
    pub label: Tensor,
    pub mix_cls: Tensor,
    pub mix_dom: Tensor,
}

impl LossTerms {
    pub fn zeros() -> Self {
        let z = Tensor::scalar(0.0);
        Self {
            sup: z.clone(),
            adv: z.clone(),
            select: z.clone(),
            label: z.clone(),
            mix_cls: z.clone(),
            mix_dom: z,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("sup", &self.sup),
            ("adv", &self.adv),
            ("select", &self.select),
            ("label", &self.label),
            ("mix_cls", &self.mix_cls),
            ("mix_dom", &self.mix_dom),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub adv: f64,
    pub select: f64,
    pub label: f64,
    pub mix_cls: f64,
    pub mix_dom: f64,
    pub total: f64,
    pub selected: usize,
    pub discarded: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepCounts {
    pub selected: usize,
    pub discarded: usize,
    pub accepted: usize,
}

/// Weighted sum of all terms. Returns the scalar to differentiate (when any
/// term is attached) and the per-term values, each already multiplied by its
/// weight, so that `total` is their plain sum.
pub fn total_loss(
    tape: &Tape,
    terms: &LossTerms,
    weights: &TermWeights,
    counts: StepCounts,
) -> Result<(Tensor, LossBreakdown), AutodiffError> {
    let mult = [
        weights.sup,
        weights.adv,
        weights.select,
        weights.label,
        weights.mix_cls,
        weights.mix_dom,
    ];
    let mut scaled = Vec::with_capacity(6);
    for ((_, t), m) in terms.named().iter().zip(mult) {
        scaled.push(tape.scale(t, m)?);
    }
    let mut total = scaled[0].clone();
    for t in &scaled[1..] {
        total = tape.add(&total, t)?;
    }
    let v: Vec<f64> = scaled.iter().map(Tensor::item).collect();
    let breakdown = LossBreakdown {
        sup: v[0],
        adv: v[1],
        select: v[2],
        label: v[3],
        mix_cls: v[4],
        mix_dom: v[5],
        total: v.iter().sum(),
        selected: counts.selected,
        discarded: counts.discarded,
        accepted: counts.accepted,
    };
    Ok((total, breakdown))
}

/// Name of the first non-finite term, if any.
pub fn non_finite_term(b: &LossBreakdown) -> Option<&'static str> {
    [
        ("sup", b.sup),
        ("adv", b.adv),
        ("select", b.select),
        ("label", b.label),
        ("mix_cls", b.mix_cls),
        ("mix_dom", b.mix_dom),
        ("total", b.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_labels(2, 4, 0.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let s = smooth_labels(0, 5, 0.2).unwrap();
        let want = [0.8, 0.05, 0.05, 0.05, 0.05];
        assert!(s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(smooth_labels(0, 1, 0.1).is_err());
        assert!(smooth_labels(3, 3, 0.1).is_err());
    }

    #[test]
    fn supervised_examples() {
        let tape = Tape::new();
        let perfect = Tensor::matrix(2, 3, vec![50.0, -50.0, -50.0, -50.0, 50.0, -50.0]).unwrap();
        let labels = vec![
            smooth_labels(0, 3, 0.0).unwrap(),
            smooth_labels(1, 3, 0.0).unwrap(),
        ];
        assert!(
            supervised_loss(&tape, Some(&perfect), &labels)
                .unwrap()
                .item()
                < 1e-40
        );
        assert_eq!(supervised_loss(&tape, None, &[]).unwrap().item(), 0.0);
        let uni = Tensor::zeros(&[2, 3]);
        assert!(
            (supervised_loss(&tape, Some(&uni), &labels).unwrap().item() - 3f64.ln()).abs() < 1e-12
        );
    }

    #[test]
    fn entropy_weight_range() {
        assert_eq!(entropy_weight(&[0.0, 1.0, 0.0]), 2.0);
        assert!((entropy_weight(&[0.2; 5]) - 1.2).abs() < 1e-12);
        let w = entropy_weight(&[0.1, 0.7, 0.2]);
        assert!(w > 1.0 && w <= 2.0);
    }

    #[test]
    fn adv_loss_at_zero_logit_is_ln2() {
        let tape = Tape::new();
        let s = Tensor::zeros(&[3, 1]);
        let t = Tensor::zeros(&[2, 1]);
        let w = EntropyWeights {
            source: vec![1.2, 1.9, 1.5],
            target: vec![1.1, 2.0],
        };
        let l = adv_loss(&tape, Some(&s), Some(&t), &w).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
        let only_src = adv_loss(&tape, Some(&s), None, &w).unwrap();
        assert!((only_src.item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(adv_loss(&tape, None, None, &w).unwrap().item(), 0.0);
    }

    #[test]
    fn adv_loss_equal_weights_is_plain_bce_and_scale_invariant() {
        let tape = Tape::new();
        let s = Tensor::matrix(2, 1, vec![0.3, -1.2]).unwrap();
        let t = Tensor::matrix(3, 1, vec![0.5, 2.0, -0.4]).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let src: f64 = s.data().iter().map(|&z| -sig(z).ln()).sum::<f64>() / 2.0;
        let tgt: f64 = t.data().iter().map(|&z| -(1.0 - sig(z)).ln()).sum::<f64>() / 3.0;
        let eq = EntropyWeights {
            source: vec![1.5; 2],
            target: vec![1.5; 3],
        };
        let l = adv_loss(&tape, Some(&s), Some(&t), &eq).unwrap().item();
        assert!((l - 0.5 * (src + tgt)).abs() < 1e-12);

        let w = EntropyWeights {
            source: vec![1.1, 1.7],
            target: vec![1.3, 1.9, 1.2],
        };
        let w7 = EntropyWeights {
            source: w.source.iter().map(|v| v * 7.0).collect(),
            target: w.target.iter().map(|v| v * 7.0).collect(),
        };
        let a = adv_loss(&tape, Some(&s), Some(&t), &w).unwrap().item();
        let b = adv_loss(&tape, Some(&s), Some(&t), &w7).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn soft_bce_minimized_at_target() {
        // golden-section search over z for target 0.3
        let f = |z: f64| {
            weighted_bce(
                &Tape::new(),
                &Tensor::matrix(1, 1, vec![z]).unwrap(),
                &[0.3],
                &[1.0],
            )
            .unwrap()
            .item()
        };
        let (mut a, mut b) = (-10.0f64, 10.0f64);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let z = 0.5 * (a + b);
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((p - 0.3).abs() < 1e-6, "{p}");
    }

    #[test]
    fn breakdown_sums_and_zero() {
        let tape = Tape::new();
        let (t, b) = total_loss(
            &tape,
            &LossTerms::zeros(),
            &TermWeights::default(),
            StepCounts::default(),
        )
        .unwrap();
        assert_eq!(t.item(), 0.0);
        assert_eq!(b.total, 0.0);
        let terms = LossTerms {
            sup: Tensor::scalar(0.25),
            adv: Tensor::scalar(0.7),
            select: Tensor::scalar(-0.1),
            label: Tensor::scalar(0.3),
            mix_cls: Tensor::scalar(1.1),
            mix_dom: Tensor::scalar(0.69),
        };
        let (t, b) = total_loss(
            &tape,
            &terms,
            &TermWeights::default(),
            StepCounts::default(),
        )
        .unwrap();
        let sum = b.sup + b.adv + b.select + b.label + b.mix_cls + b.mix_dom;
        assert!((b.total - sum).abs() < 1e-9 && (t.item() - sum).abs() < 1e-9);
        let off = TermWeights {
            label: 0.0,
            ..Default::default()
        };
        let (_, b2) = total_loss(&tape, &terms, &off, StepCounts::default()).unwrap();
        assert_eq!(b2.label, 0.0);
        assert_eq!(b2.sup, b.sup);
    }
}
