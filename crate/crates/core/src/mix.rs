//! Inter-domain, intra-source and intra-target mixup and the mixed-sample
//! classifier and discriminator losses.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::models::{grl, GrlLambda, ModelBundle, ModelError};
use crate::objective::{soft_cross_entropy, weighted_bce, ObjectiveError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixError {
    #[error("beta alpha must be positive, got {0}")]
    BetaAlpha(f64),
    #[error("operands have different widths")]
    Width,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub beta_alpha: f64,
    /// Include the mixed-sample classification loss.
    pub cls: bool,
    /// Include the mixed-sample domain loss.
    pub dom: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            beta_alpha: 2.0,
            cls: true,
            dom: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Inter,
    IntraSrc,
    IntraTgt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub input: Vec<f64>,
    pub label: Vec<f64>,
    pub lam: f64,
    pub kind: MixKind,
    /// 1 = source.
    pub domain_label: f64,
}

/// An input vector with its label distribution.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub input: &'a [f64],
    pub label: &'a [f64],
}

/// `lambda ~ Beta(a, a)`.
pub fn sample_mix_ratio<R: Rng + ?Sized>(cfg: &MixConfig, rng: &mut R) -> Result<f64, MixError> {
    let beta = Beta::new(cfg.beta_alpha, cfg.beta_alpha)
        .map_err(|_| MixError::BetaAlpha(cfg.beta_alpha))?;
    Ok(beta.sample(rng))
}

fn lerp(lam: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| lam * x + (1.0 - lam) * y)
        .collect()
}

/// Convex combination `lam * a + (1 - lam) * b` of inputs and labels.
pub fn mix_pair(lam: f64, a: Labeled, b: Labeled, kind: MixKind) -> Result<MixedSample, MixError> {
    if a.input.len() != b.input.len() || a.label.len() != b.label.len() {
        return Err(MixError::Width);
    }
    let domain_label = match kind {
        MixKind::Inter => lam,
        MixKind::IntraSrc => 1.0,
        MixKind::IntraTgt => 0.0,
    };
    Ok(MixedSample {
        input: lerp(lam, a.input, b.input),
        label: lerp(lam, a.label, b.label),
        lam,
        kind,
        domain_label,
    })
}

/// Random cyclic permutation (no fixed points for `n >= 2`).
fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn intra<R: Rng + ?Sized>(
    pool: &[Labeled],
    kind: MixKind,
    cfg: &MixConfig,
    rng: &mut R,
    out: &mut Vec<MixedSample>,
) -> Result<(), MixError> {
    let partner = derangement(pool.len(), rng);
    for (i, &j) in partner.iter().enumerate() {
        let lam = sample_mix_ratio(cfg, rng)?;
        out.push(mix_pair(lam, pool[i], pool[j], kind)?);
    }
    Ok(())
}

/// Inter pairs first, then intra-source, then intra-target. Empty pools
/// yield no samples of the kinds that need them.
pub fn build_mix_batches<R: Rng + ?Sized>(
    selected: &[Labeled],
    target: &[Labeled],
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<Vec<MixedSample>, MixError> {
    let mut out = Vec::with_capacity(selected.len() * 2 + target.len() * 2);
    let pairs = selected.len().min(target.len());
    if pairs > 0 {
        let mut si: Vec<usize> = (0..selected.len()).collect();
        let mut ti: Vec<usize> = (0..target.len()).collect();
        si.shuffle(rng);
        ti.shuffle(rng);
        for (&a, &b) in si.iter().zip(&ti).take(pairs) {
            let lam = sample_mix_ratio(cfg, rng)?;
            out.push(mix_pair(lam, selected[a], target[b], MixKind::Inter)?);
        }
    }
    intra(selected, MixKind::IntraSrc, cfg, rng, &mut out)?;
    intra(target, MixKind::IntraTgt, cfg, rng, &mut out)?;
    Ok(out)
}

/// `(mix_cls, mix_dom)` from already computed class logits and discriminator
/// logits (one row per mixed sample, same order).
pub fn mix_losses_from_logits(
    tape: &Tape,
    class_logits: &Tensor,
    domain_logits: &Tensor,
    mixed: &[MixedSample],
) -> Result<(Tensor, Tensor), MixError> {
    let labels: Vec<&[f64]> = mixed.iter().map(|m| m.label.as_slice()).collect();
    let cls = soft_cross_entropy(tape, class_logits, &Tensor::from_rows(&labels)?)?;
    let n = mixed.len();
    let targets: Vec<f64> = mixed.iter().map(|m| m.domain_label).collect();
    let dom = weighted_bce(tape, domain_logits, &targets, &vec![1.0 / n as f64; n])?;
    Ok((cls, dom))
}

/// Mixed-sample losses through `F(G(x))` and `D(grl(G(x)))`.
pub fn mix_loss(
    tape: &Tape,
    models: &ModelBundle,
    lambda: GrlLambda,
    mixed: &[MixedSample],
) -> Result<(Tensor, Tensor), MixError> {
    if mixed.is_empty() {
        return Ok((Tensor::scalar(0.0), Tensor::scalar(0.0)));
    }
    let inputs: Vec<&[f64]> = mixed.iter().map(|m| m.input.as_slice()).collect();
    let x = Tensor::from_rows(&inputs)?;
    let feats = models.g.forward(tape, &x)?;
    let logits = models.f.forward(tape, &feats)?;
    let dom = models.d.forward(tape, &grl(tape, &feats, lambda)?)?;
    mix_losses_from_logits(tape, &logits, &dom, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lab<'a>(x: &'a [f64], y: &'a [f64]) -> Labeled<'a> {
        Labeled { input: x, label: y }
    }

    #[test]
    fn endpoints() {
        let (xa, ya) = ([1.0, 2.0], [1.0, 0.0]);
        let (xb, yb) = ([5.0, -1.0], [0.0, 1.0]);
        let m1 = mix_pair(1.0, lab(&xa, &ya), lab(&xb, &yb), MixKind::Inter).unwrap();
        assert_eq!(
            (m1.input.as_slice(), m1.label.as_slice()),
            (&xa[..], &ya[..])
        );
        let m0 = mix_pair(0.0, lab(&xa, &ya), lab(&xb, &yb), MixKind::Inter).unwrap();
        assert_eq!(
            (m0.input.as_slice(), m0.label.as_slice()),
            (&xb[..], &yb[..])
        );
        assert_eq!(m0.domain_label, 0.0);
        let m = mix_pair(
            0.37,
            lab(&xa, &[0.2, 0.8]),
            lab(&xb, &[0.6, 0.4]),
            MixKind::IntraSrc,
        )
        .unwrap();
        assert!((m.label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.domain_label, 1.0);
    }

    #[test]
    fn beta_draws_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MixConfig::default();
        assert!(
            (0..10_000).all(|_| (0.0..=1.0).contains(&sample_mix_ratio(&cfg, &mut rng).unwrap()))
        );
        let bad = MixConfig {
            beta_alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(
            sample_mix_ratio(&bad, &mut rng),
            Err(MixError::BetaAlpha(0.0))
        );
    }

    #[test]
    fn batch_sizes_and_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.0]).collect();
        let xt: Vec<[f64; 2]> = (0..3).map(|i| [0.0, i as f64]).collect();
        let y = [0.5, 0.5];
        let s: Vec<Labeled> = xs.iter().map(|x| lab(x, &y)).collect();
        let t: Vec<Labeled> = xt.iter().map(|x| lab(x, &y)).collect();
        let m = build_mix_batches(&s, &t, &MixConfig::default(), &mut rng).unwrap();
        let count = |k| m.iter().filter(|s| s.kind == k).count();
        assert_eq!(
            (
                count(MixKind::Inter),
                count(MixKind::IntraSrc),
                count(MixKind::IntraTgt)
            ),
            (3, 5, 3)
        );
        for s in &m {
            match s.kind {
                MixKind::Inter => assert_eq!(s.domain_label, s.lam),
                MixKind::IntraSrc => assert_eq!(s.domain_label, 1.0),
                MixKind::IntraTgt => assert_eq!(s.domain_label, 0.0),
            }
        }
        let only_src = build_mix_batches(&s, &[], &MixConfig::default(), &mut rng).unwrap();
        assert!(only_src.iter().all(|s| s.kind == MixKind::IntraSrc));
        assert!(build_mix_batches(&[], &[], &MixConfig::default(), &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn intra_pairs_avoid_self_unless_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..12 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut q = p.clone();
            q.sort();
            assert_eq!(q, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(derangement(1, &mut rng), vec![0]);
    }

    #[test]
    fn domain_loss_at_zero_logit() {
        let tape = Tape::new();
        let mk = |kind, lam, dl| MixedSample {
            input: vec![0.0],
            label: vec![1.0, 0.0],
            lam,
            kind,
            domain_label: dl,
        };
        let mixed = vec![
            mk(MixKind::IntraSrc, 0.3, 1.0),
            mk(MixKind::IntraTgt, 0.6, 0.0),
            mk(MixKind::Inter, 0.5, 0.5),
        ];
        let (_, dom) = mix_losses_from_logits(
            &tape,
            &Tensor::zeros(&[3, 2]),
            &Tensor::zeros(&[3, 1]),
            &mixed,
        )
        .unwrap();
        assert!((dom.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mix_is_zero() {
        let shapes = crate::models::ModelShapes {
            input_dim: 2,
            num_classes: 3,
            g_hidden: vec![4],
            feature_dim: 3,
            f_hidden: vec![],
            d_hidden: vec![4, 4],
            h_hidden: vec![4],
        };
        let m = ModelBundle::init(&shapes, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (c, d) = mix_loss(&Tape::new(), &m, GrlLambda::new(0.5).unwrap(), &[]).unwrap();
        assert_eq!((c.item(), d.item()), (0.0, 0.0));
    }
}
