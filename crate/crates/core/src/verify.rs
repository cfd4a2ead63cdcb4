//! Finite-difference verification of every autodiff primitive and every
//! loss term, at seeded random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{backward, column, grad_check, AutodiffError, Tape, Tensor};
use crate::label::{label_loss, SoftPseudoLabel};
use crate::mix::{mix_losses_from_logits, MixKind, MixedSample};
use crate::objective::{adv_loss, smooth_labels, supervised_loss, EntropyWeights};
use crate::select::{
    flip_slopes, select_loss, BatchPartition, RegForm, SelectConfig, SelectionDecision,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Points per check.
pub const POINTS: usize = 10;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

type Res<T> = Result<T, AutodiffError>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values bounded away from zero, for functions with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(y * r)`: reduces any output to a scalar while exercising every entry.
fn contract(tape: &Tape, y: &Tensor, r: &Tensor) -> Res<Tensor> {
    tape.sum(&tape.mul(y, r)?)
}

/// Relative error between the reverse-mode gradient of `analytic` and
/// central differences of `numeric`. The two agree for ordinary functions;
/// they differ for operators whose backward pass is deliberately not the
/// derivative of their forward pass.
pub fn grad_check_against<A, N>(analytic: A, numeric: N, x: &Tensor, eps: f64) -> Res<f64>
where
    A: Fn(&Tape, &Tensor) -> Res<Tensor>,
    N: Fn(&Tensor) -> Res<f64>,
{
    let tape = Tape::new();
    let xl = tape.leaf(x);
    let y = analytic(&tape, &xl)?;
    let g = backward(&tape, &y)?.wrt(&xl)?;
    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = numeric(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - eps;
        let fm = numeric(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let a = g.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
    }
    Ok(worst)
}

struct Runner {
    rng: ChaCha8Rng,
    rows: Vec<CheckRow>,
}

impl Runner {
    fn record(&mut self, name: &str, errs: Vec<f64>) {
        self.rows.push(CheckRow {
            name: name.into(),
            points: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    }

    /// `f` maps a contraction tensor and an input to a scalar.
    fn unary<F>(
        &mut self,
        name: &str,
        shape: &[usize],
        out_shape: &[usize],
        domain: Domain,
        f: F,
    ) -> Res<()>
    where
        F: Fn(&Tape, &Tensor) -> Res<Tensor>,
    {
        let mut errs = vec![];
        for _ in 0..POINTS {
            let x = match domain {
                Domain::Any => uniform(&mut self.rng, shape, -2.0, 2.0),
                Domain::Positive => uniform(&mut self.rng, shape, 0.2, 3.0),
                Domain::NonZero => away_from_zero(&mut self.rng, shape),
            };
            let r = uniform(&mut self.rng, out_shape, -1.0, 1.0);
            errs.push(grad_check(|t, x| contract(t, &f(t, x)?, &r), &x, EPS)?);
        }
        self.record(name, errs);
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    NonZero,
}

fn primitives(run: &mut Runner) -> Res<()> {
    use Domain::*;
    let c34 = uniform(&mut run.rng, &[3, 4], -1.0, 1.0);
    let c45 = uniform(&mut run.rng, &[4, 5], -1.0, 1.0);
    let c23 = uniform(&mut run.rng, &[2, 3], -1.0, 1.0);
    run.unary("matmul.lhs", &[3, 4], &[3, 5], Any, |t, x| {
        t.matmul(x, &c45)
    })?;
    run.unary("matmul.rhs", &[3, 4], &[2, 4], Any, |t, x| {
        t.matmul(&c23, x)
    })?;
    run.unary("add", &[3, 4], &[3, 4], Any, |t, x| t.add(x, &c34))?;
    run.unary("add.bias", &[4], &[3, 4], Any, |t, x| t.add(&c34, x))?;
    run.unary("sub", &[3, 4], &[3, 4], Any, |t, x| {
        t.sub(&c34, &t.sub(x, &c34)?)
    })?;
    run.unary("mul", &[3, 4], &[3, 4], Any, |t, x| {
        t.mul(&t.mul(x, &c34)?, x)
    })?;
    run.unary("scale", &[3, 4], &[3, 4], Any, |t, x| t.scale(x, -2.5))?;
    run.unary("relu", &[3, 4], &[3, 4], NonZero, |t, x| t.relu(x))?;
    run.unary("exp", &[3, 4], &[3, 4], Any, |t, x| t.exp(x))?;
    run.unary("log", &[3, 4], &[3, 4], Positive, |t, x| t.log(x))?;
    run.unary("log_softmax", &[3, 4], &[3, 4], Any, |t, x| {
        t.log_softmax(x)
    })?;
    run.unary("sigmoid", &[3, 4], &[3, 4], Any, |t, x| t.sigmoid(x))?;
    run.unary("mean", &[3, 4], &[], Any, |t, x| t.mean(&t.square(x)?))?;
    run.unary("sum", &[3, 4], &[], Any, |t, x| t.sum(&t.mul(x, &c34)?))?;
    run.unary("concat_rows", &[2, 4], &[5, 4], Any, |t, x| {
        t.concat_rows(&[&c34, x])
    })?;
    run.unary("slice_rows", &[4, 3], &[2, 3], Any, |t, x| {
        t.slice_rows(x, 1, 3)
    })?;
    run.unary("square", &[3, 4], &[3, 4], Any, |t, x| t.square(x))?;
    run.unary("sqrt", &[3, 4], &[3, 4], Positive, |t, x| t.sqrt(x))?;
    run.unary("transpose", &[3, 4], &[4, 3], Any, |t, x| t.transpose(x))?;

    // Gradient reversal: backward is -lambda times the identity's derivative.
    let mut errs = vec![];
    for _ in 0..POINTS {
        let x = uniform(&mut run.rng, &[3, 4], -2.0, 2.0);
        let r = uniform(&mut run.rng, &[3, 4], -1.0, 1.0);
        let lambda = run.rng.random_range(0.1..1.0);
        let numeric = |x: &Tensor| {
            Ok(-lambda
                * x.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>())
        };
        errs.push(grad_check_against(
            |t, x| contract(t, &t.grl(x, lambda)?, &r),
            numeric,
            &x,
            EPS,
        )?);
    }
    run.record("grl", errs);

    // Straight-through: backward is the derivative of the soft input.
    let mut errs = vec![];
    for _ in 0..POINTS {
        let x = uniform(&mut run.rng, &[4, 1], -2.0, 2.0);
        let r = uniform(&mut run.rng, &[4, 1], -1.0, 1.0);
        let hard = Tensor::new(
            vec![4, 1],
            x.data()
                .iter()
                .map(|&v| f64::from(u8::from(v >= 0.0)))
                .collect(),
        )?;
        let analytic =
            |t: &Tape, x: &Tensor| contract(t, &t.straight_through(&t.sigmoid(x)?, &hard)?, &r);
        let numeric = |x: &Tensor| {
            let t = Tape::new();
            Ok(contract(&t, &t.sigmoid(x)?, &r)?.item())
        };
        errs.push(grad_check_against(analytic, numeric, &x, EPS)?);
    }
    run.record("straight_through", errs);
    Ok(())
}

fn losses(run: &mut Runner) -> Res<()> {
    let (n, c) = (6, 4);

    let mut errs = vec![];
    for _ in 0..POINTS {
        let logits = uniform(&mut run.rng, &[n, c], -2.0, 2.0);
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| smooth_labels(run.rng.random_range(0..c), c, 0.2).expect("valid"))
            .collect();
        errs.push(grad_check(
            |t, x| Ok(supervised_loss(t, Some(x), &y).map_err(unwrap_obj)?),
            &logits,
            EPS,
        )?);
    }
    run.record("loss.sup", errs);

    let mut errs = vec![];
    for _ in 0..POINTS {
        let z = uniform(&mut run.rng, &[2 * n, 1], -2.0, 2.0);
        let w = EntropyWeights {
            source: (0..n).map(|_| run.rng.random_range(1.0..2.0)).collect(),
            target: (0..n).map(|_| run.rng.random_range(1.0..2.0)).collect(),
        };
        let f = |t: &Tape, x: &Tensor| {
            let s = t.slice_rows(x, 0, n)?;
            let tg = t.slice_rows(x, n, 2 * n)?;
            adv_loss(t, Some(&s), Some(&tg), &w).map_err(unwrap_obj)
        };
        errs.push(grad_check(f, &z, EPS)?);
    }
    run.record("loss.adv", errs);

    // Selector loss as a function of the selector logits. The hard partition
    // is fixed at the base point and the relaxed weights are used on both
    // sides, since the straight-through forward value is piecewise constant.
    let d = 3;
    let mut errs = vec![];
    for _ in 0..POINTS {
        let z = uniform(&mut run.rng, &[n, 2], -1.5, 1.5);
        let sf = uniform(&mut run.rng, &[n, d], -2.0, 2.0);
        let tf = uniform(&mut run.rng, &[n, d], -1.0, 3.0);
        let tl = uniform(&mut run.rng, &[n, c], -2.0, 2.0);
        let cfg = SelectConfig {
            margin: 5.0,
            lambda_s: 1.0,
            lambda_reg1: run.rng.random_range(0.1..2.0),
            lambda_reg2: 0.1,
            reg_form: [RegForm::Binary, RegForm::Literal, RegForm::BatchMean]
                [run.rng.random_range(0..3)],
            triplet: true,
        };
        let selected_at = |i: usize| z.row(i)[0] >= z.row(i)[1] || i == 0;
        let picks: Vec<bool> = (0..n).map(|i| selected_at(i) && i != n - 1).collect();
        let f = |t: &Tape, x: &Tensor| {
            let la = t.log_softmax(x)?;
            let soft = t.exp(&la)?;
            let part = BatchPartition {
                selected: (0..n).filter(|&i| picks[i]).collect(),
                discarded: (0..n).filter(|&i| !picks[i]).collect(),
                decisions: picks
                    .iter()
                    .map(|&h| SelectionDecision {
                        soft: [0.5, 0.5],
                        hard: h,
                    })
                    .collect(),
                st_select: Some(column(t, &soft, 0)?),
                log_alpha: Some(la),
            };
            Ok(select_loss(t, &part, &sf, &tf, &tl, &cfg)
                .map_err(unwrap_sel)?
                .total)
        };
        // The selected side's coverage term enters as `slope * (w - detach(w))`:
        // zero in value, linear in the weights around the base point.
        let sel: Vec<usize> = (0..n).filter(|&i| picks[i]).collect();
        let slope: Vec<f64> = flip_slopes(&sf, &tf, &sel)
            .iter()
            .map(|a| 0.5 * cfg.lambda_s * a)
            .collect();
        let select_prob = |x: &Tensor| -> Res<Vec<f64>> {
            let t = Tape::new();
            Ok(t.exp(&t.log_softmax(x)?)?
                .data()
                .chunks(2)
                .map(|r| r[0])
                .collect())
        };
        let base = select_prob(&z)?;
        let numeric = |x: &Tensor| -> Res<f64> {
            let t = Tape::new();
            let v = f(&t, x)?.item();
            let p = select_prob(x)?;
            Ok(v + p
                .iter()
                .zip(&base)
                .zip(&slope)
                .map(|((p, b), s)| s * (p - b))
                .sum::<f64>())
        };
        errs.push(grad_check_against(f, numeric, &z, EPS)?);
    }
    run.record("loss.select", errs);

    let mut errs = vec![];
    for _ in 0..POINTS {
        let tl = uniform(&mut run.rng, &[n, c], -2.0, 2.0);
        let part = BatchPartition::select_all(n);
        let sf = uniform(&mut run.rng, &[n, d], -2.0, 2.0);
        let tf = uniform(&mut run.rng, &[n, d], -2.0, 2.0);
        let cfg = SelectConfig {
            lambda_reg2: 1.0,
            ..Default::default()
        };
        let f = |t: &Tape, x: &Tensor| {
            Ok(select_loss(t, &part, &sf, &tf, x, &cfg)
                .map_err(unwrap_sel)?
                .total)
        };
        errs.push(grad_check(f, &tl, EPS)?);
    }
    run.record("loss.select.diversity", errs);

    let mut errs = vec![];
    for _ in 0..POINTS {
        let tl = uniform(&mut run.rng, &[n, c], -2.0, 2.0);
        let labels: Vec<SoftPseudoLabel> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| run.rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                SoftPseudoLabel {
                    probs: raw.iter().map(|v| v / s).collect(),
                    confidence: 1.0,
                    accepted: true,
                }
            })
            .collect();
        let refs: Vec<&SoftPseudoLabel> = labels.iter().collect();
        let f = |t: &Tape, x: &Tensor| {
            label_loss(t, Some(x), &refs).map_err(|e| match e {
                crate::label::LabelError::Autodiff(a) => a,
                other => AutodiffError::Invalid(other.to_string()),
            })
        };
        errs.push(grad_check(f, &tl, EPS)?);
    }
    run.record("loss.label", errs);

    let mut cls_errs = vec![];
    let mut dom_errs = vec![];
    for _ in 0..POINTS {
        let kinds = [MixKind::Inter, MixKind::IntraSrc, MixKind::IntraTgt];
        let mixed: Vec<MixedSample> = (0..n)
            .map(|i| {
                let lam = run.rng.random_range(0.0..1.0);
                let kind = kinds[i % 3];
                let raw: Vec<f64> = (0..c).map(|_| run.rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let domain_label = match kind {
                    MixKind::Inter => lam,
                    MixKind::IntraSrc => 1.0,
                    MixKind::IntraTgt => 0.0,
                };
                MixedSample {
                    input: vec![],
                    label: raw.iter().map(|v| v / s).collect(),
                    lam,
                    kind,
                    domain_label,
                }
            })
            .collect();
        let cl = uniform(&mut run.rng, &[n, c], -2.0, 2.0);
        let dl = uniform(&mut run.rng, &[n, 1], -2.0, 2.0);
        let mix_err = |e: crate::mix::MixError| AutodiffError::Invalid(e.to_string());
        cls_errs.push(grad_check(
            |t, x| {
                Ok(mix_losses_from_logits(t, x, &dl, &mixed)
                    .map_err(mix_err)?
                    .0)
            },
            &cl,
            EPS,
        )?);
        dom_errs.push(grad_check(
            |t, x| {
                Ok(mix_losses_from_logits(t, &cl, x, &mixed)
                    .map_err(mix_err)?
                    .1)
            },
            &dl,
            EPS,
        )?);
    }
    run.record("loss.mix_cls", cls_errs);
    run.record("loss.mix_dom", dom_errs);
    Ok(())
}

fn unwrap_obj(e: crate::objective::ObjectiveError) -> AutodiffError {
    match e {
        crate::objective::ObjectiveError::Autodiff(a) => a,
        other => AutodiffError::Invalid(other.to_string()),
    }
}

fn unwrap_sel(e: crate::select::SelectError) -> AutodiffError {
    match e {
        crate::select::SelectError::Autodiff(a) => a,
        other => AutodiffError::Invalid(other.to_string()),
    }
}

/// All primitive checks followed by all loss-term checks.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>, AutodiffError> {
    let mut run = Runner {
        rng: ChaCha8Rng::seed_from_u64(seed),
        rows: vec![],
    };
    primitives(&mut run)?;
    losses(&mut run)?;
    Ok(run.rows)
}
