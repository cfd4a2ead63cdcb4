//! Source-sample selection: binary Gumbel-Softmax with a straight-through
//! hard decision, the average Hausdorff distance, and the selector's
//! triplet + regularizer objective.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{column, gather_rows, recip, row_sums, AutodiffError, Tape, Tensor};
use crate::models::{MlpParams, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("gumbel temperature must be positive, got {0}")]
    Tau(f64),
    #[error("point set is empty")]
    EmptySet,
    #[error("point sets have different widths ({0} vs {1})")]
    Width(usize, usize),
    #[error("invalid select config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Form of the selector-probability regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegForm {
    /// Batch mean of `p ln p + (1 - p) ln(1 - p)`.
    Binary,
    /// Batch mean of `p ln p`.
    Literal,
    /// `q ln q + (1 - q) ln(1 - q)` of the batch-mean probability `q`.
    BatchMean,
}

impl std::str::FromStr for RegForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(Self::Binary),
            "literal" => Ok(Self::Literal),
            "batch_mean" => Ok(Self::BatchMean),
            _ => Err(format!("expected binary|literal|batch_mean, got `{s}`")),
        }
    }
}

impl std::fmt::Display for RegForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Binary => "binary",
            Self::Literal => "literal",
            Self::BatchMean => "batch_mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub margin: f64,
    pub lambda_s: f64,
    pub lambda_reg1: f64,
    pub lambda_reg2: f64,
    pub reg_form: RegForm,
    /// Include the Hausdorff triplet term.
    pub triplet: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            margin: 20.0,
            lambda_s: 0.1,
            lambda_reg1: 1.0,
            lambda_reg2: 0.1,
            reg_form: RegForm::BatchMean,
            triplet: true,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        let checks = [
            ("margin", self.margin),
            ("lambda_s", self.lambda_s),
            ("lambda_reg1", self.lambda_reg1),
            ("lambda_reg2", self.lambda_reg2),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SelectError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One Gumbel-Softmax draw over (select, discard).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionDecision {
    /// `(y_select, y_discard)`, sums to one.
    pub soft: [f64; 2],
    /// `true` when `soft[0] >= soft[1]`.
    pub hard: bool,
}

/// Standard Gumbel noise `-ln(-ln U)`, `U ~ Uniform(0, 1)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Relaxed sample for given noise: `softmax((log_alpha + noise) / tau)`.
pub fn gumbel_softmax_with_noise(
    log_alpha: [f64; 2],
    noise: [f64; 2],
    tau: f64,
) -> Result<SelectionDecision, SelectError> {
    if !(tau > 0.0) {
        return Err(SelectError::Tau(tau));
    }
    let z = [
        (log_alpha[0] + noise[0]) / tau,
        (log_alpha[1] + noise[1]) / tau,
    ];
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    let soft = [e[0] / s, e[1] / s];
    Ok(SelectionDecision {
        soft,
        hard: soft[0] >= soft[1],
    })
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    log_alpha: [f64; 2],
    tau: f64,
    rng: &mut R,
) -> Result<SelectionDecision, SelectError> {
    if !(tau > 0.0) {
        return Err(SelectError::Tau(tau));
    }
    let noise = [sample_gumbel(rng), sample_gumbel(rng)];
    gumbel_softmax_with_noise(log_alpha, noise, tau)
}

/// Split of a source batch into selected and discarded samples.
#[derive(Debug, Clone)]
pub struct BatchPartition {
    pub selected: Vec<usize>,
    pub discarded: Vec<usize>,
    pub decisions: Vec<SelectionDecision>,
    /// `n x 1` straight-through selection values (row `i` is decision `i`);
    /// absent for select-all.
    pub st_select: Option<Tensor>,
    /// `n x 2` selector log-probabilities `(ln p_select, ln p_discard)`.
    pub log_alpha: Option<Tensor>,
}

impl BatchPartition {
    pub fn select_all(n: usize) -> Self {
        Self {
            selected: (0..n).collect(),
            discarded: vec![],
            decisions: vec![
                SelectionDecision {
                    soft: [1.0, 0.0],
                    hard: true
                };
                n
            ],
            st_select: None,
            log_alpha: None,
        }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn hard_mask(&self) -> Vec<bool> {
        self.decisions.iter().map(|d| d.hard).collect()
    }
}

/// Runs the selector on a source batch and draws one decision per sample.
pub fn partition_batch<R: Rng + ?Sized>(
    tape: &Tape,
    selector: &MlpParams,
    batch: &Tensor,
    tau: f64,
    rng: &mut R,
) -> Result<BatchPartition, SelectError> {
    if !(tau > 0.0) {
        return Err(SelectError::Tau(tau));
    }
    let n = batch.rows();
    let logits = selector.forward(tape, batch)?;
    let log_alpha = tape.log_softmax(&logits)?;
    let noise: Vec<f64> = (0..2 * n).map(|_| sample_gumbel(rng)).collect();
    let perturbed = tape.add(&log_alpha, &Tensor::matrix(n, 2, noise)?)?;
    let soft = tape.exp(&tape.log_softmax(&tape.scale(&perturbed, 1.0 / tau)?)?)?;

    let mut decisions = Vec::with_capacity(n);
    let (mut selected, mut discarded) = (vec![], vec![]);
    for i in 0..n {
        let s = [soft.row(i)[0], soft.row(i)[1]];
        let hard = s[0] >= s[1];
        if hard {
            selected.push(i);
        } else {
            discarded.push(i);
        }
        decisions.push(SelectionDecision { soft: s, hard });
    }
    let hard = Tensor::matrix(
        n,
        1,
        decisions
            .iter()
            .map(|d| f64::from(u8::from(d.hard)))
            .collect(),
    )?;
    let st = tape.straight_through(&column(tape, &soft, 0)?, &hard)?;
    Ok(BatchPartition {
        selected,
        discarded,
        decisions,
        st_select: Some(st),
        log_alpha: Some(log_alpha),
    })
}

fn check_sets(x: &Tensor, y: &Tensor) -> Result<(), SelectError> {
    if x.is_empty() || y.is_empty() || x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(SelectError::EmptySet);
    }
    if x.cols() != y.cols() {
        return Err(SelectError::Width(x.cols(), y.cols()));
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// For each row of `x`, the nearest row of `y` restricted to `candidates`.
fn nearest(x: &Tensor, y: &Tensor, candidates: &[usize]) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let xi = x.row(i);
            let mut best = (f64::INFINITY, candidates[0]);
            for &j in candidates {
                let d = euclid(xi, y.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Symmetric average Hausdorff distance between the rows of `x` and `y`.
pub fn average_hausdorff(x: &Tensor, y: &Tensor) -> Result<f64, SelectError> {
    check_sets(x, y)?;
    let directed = |a: &Tensor, b: &Tensor| {
        (0..a.rows())
            .map(|i| {
                (0..b.rows())
                    .map(|j| euclid(a.row(i), b.row(j)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.rows() as f64
    };
    Ok(0.5 * (directed(x, y) + directed(y, x)))
}

/// Row-wise distances `||x_i - y_{idx_i}||` on the tape.
fn paired_distances(
    tape: &Tape,
    x: &Tensor,
    y: &Tensor,
    idx: &[usize],
) -> Result<Tensor, AutodiffError> {
    let diff = tape.sub(x, &gather_rows(tape, y, idx)?)?;
    tape.sqrt(&row_sums(tape, &tape.square(&diff)?)?)
}

/// Average Hausdorff distance between the subset of `source` rows weighted by
/// `weights` (`n x 1`, forward values 0/1) and all of `target`.
///
/// The source-side mean is `sum(w_i a_i) / sum(w_i)`, so with straight-through
/// weights the forward value is exactly the distance between the hard subset
/// and the target, while gradients reach the weights. The target-side mean is
/// piecewise constant in the weights. With `coverage` set it reaches them
/// through [`flip_slopes`] attached to `w - detach(w)`, which is zero in
/// value; otherwise it carries no weight gradient.
///
/// Only the selected side uses `coverage`. On the discarded side the same
/// slopes reward discarding a few samples far from every target point, which
/// keeps near outlier classes selected.
fn weighted_hausdorff(
    tape: &Tape,
    source: &Tensor,
    target: &Tensor,
    members: &[usize],
    weights: &Tensor,
    src_to_tgt: &Tensor,
    coverage: bool,
) -> Result<Tensor, AutodiffError> {
    let weighted = tape.sum(&tape.mul(weights, src_to_tgt)?)?;
    let total = tape.sum(weights)?;
    let src_side = tape.mul(&weighted, &recip(tape, &total)?)?;

    let member_rows = gather_rows(tape, source, members)?;
    let local = nearest(
        target,
        &member_rows,
        &(0..members.len()).collect::<Vec<_>>(),
    );
    let tgt_side = tape.mean(&paired_distances(tape, target, &member_rows, &local)?)?;
    let tgt_side = if coverage {
        let flip = Tensor::new(vec![source.rows(), 1], flip_slopes(source, target, members))?;
        let zero_fwd = tape.sub(weights, &weights.detach())?;
        tape.add(&tgt_side, &tape.sum(&tape.mul(&flip, &zero_fwd)?)?)?
    } else {
        tgt_side
    };
    tape.scale(&tape.add(&src_side, &tgt_side)?, 0.5)
}

/// Change in the target-side mean `mean_y min_{x in members} |x - y|` when
/// each source row is toggled into (or kept in) the member set, as a slope
/// per unit of weight. Nonpositive: adding a row can only shrink distances.
pub fn flip_slopes(source: &Tensor, target: &Tensor, members: &[usize]) -> Vec<f64> {
    let mut in_set = vec![false; source.rows()];
    for &i in members {
        in_set[i] = true;
    }
    let mut slopes = vec![0.0; source.rows()];
    let scale = 1.0 / target.rows() as f64;
    for j in 0..target.rows() {
        let y = target.row(j);
        let (mut best, mut second, mut arg) = (f64::INFINITY, f64::INFINITY, usize::MAX);
        for &i in members {
            let d = euclid(source.row(i), y);
            if d < best {
                second = best;
                best = d;
                arg = i;
            } else if d < second {
                second = d;
            }
        }
        for (i, slope) in slopes.iter_mut().enumerate() {
            if !in_set[i] {
                *slope -= scale * (best - euclid(source.row(i), y)).max(0.0);
            }
        }
        if second.is_finite() {
            slopes[arg] -= scale * (second - best);
        }
    }
    slopes
}

#[derive(Debug, Clone)]
pub struct SelectLoss {
    pub triplet: Tensor,
    pub reg_select: Tensor,
    pub reg_diversity: Tensor,
    pub total: Tensor,
    pub d_sel: Option<f64>,
    pub d_dis: Option<f64>,
}

/// `lambda_s * max(d_sel - d_dis + margin, 0) + reg_select + reg_diversity`.
///
/// `source_features` are `G` features of the whole source batch, in batch
/// order; `target_logits` are `F(G(target))`.
pub fn select_loss(
    tape: &Tape,
    partition: &BatchPartition,
    source_features: &Tensor,
    target_features: &Tensor,
    target_logits: &Tensor,
    cfg: &SelectConfig,
) -> Result<SelectLoss, SelectError> {
    check_sets(source_features, target_features)?;
    if source_features.rows() != partition.len() {
        return Err(SelectError::Config(
            "partition and feature rows disagree".into(),
        ));
    }
    let n = partition.len();
    let zero = Tensor::scalar(0.0);

    let mut d_sel = None;
    let mut d_dis = None;
    let triplet = match (
        &partition.st_select,
        partition.selected.is_empty(),
        partition.discarded.is_empty(),
    ) {
        (Some(st), false, false) if cfg.triplet => {
            let all: Vec<usize> = (0..target_features.rows()).collect();
            let nn = nearest(source_features, target_features, &all);
            let a = paired_distances(tape, source_features, target_features, &nn)?;
            let not_st = tape.sub(&Tensor::full(&[n, 1], 1.0), st)?;
            let ds = weighted_hausdorff(
                tape,
                source_features,
                target_features,
                &partition.selected,
                st,
                &a,
                true,
            )?;
            let dd = weighted_hausdorff(
                tape,
                source_features,
                target_features,
                &partition.discarded,
                &not_st,
                &a,
                false,
            )?;
            d_sel = Some(ds.item());
            d_dis = Some(dd.item());
            let gap = tape.add(&tape.sub(&ds, &dd)?, &Tensor::scalar(cfg.margin))?;
            tape.scale(&tape.relu(&gap)?, cfg.lambda_s)?
        }
        _ => zero.clone(),
    };

    let reg_select = match &partition.log_alpha {
        Some(la) => {
            let p_la = tape.mul(&tape.exp(la)?, la)?;
            let v = match cfg.reg_form {
                RegForm::Binary => tape.scale(&tape.sum(&p_la)?, 1.0 / n as f64)?,
                RegForm::Literal => tape.mean(&column(tape, &p_la, 0)?)?,
                RegForm::BatchMean => {
                    let probs = tape.exp(la)?;
                    let mean = tape.matmul(&Tensor::full(&[1, n], 1.0 / n as f64), &probs)?;
                    tape.sum(&tape.mul(&mean, &tape.log(&mean)?)?)?
                }
            };
            tape.scale(&v, cfg.lambda_reg1)?
        }
        None => zero.clone(),
    };

    let m = target_logits.rows();
    let ls = tape.log_softmax(target_logits)?;
    let q = tape.exp(&ls)?;
    let mean_entropy = tape.scale(&tape.sum(&tape.mul(&q, &ls)?)?, -1.0 / m as f64)?;
    let q_bar = tape.matmul(&Tensor::full(&[1, m], 1.0 / m as f64), &q)?;
    let entropy_of_mean = tape.scale(&tape.sum(&tape.mul(&q_bar, &tape.log(&q_bar)?)?)?, -1.0)?;
    let reg_diversity = tape.scale(&tape.sub(&mean_entropy, &entropy_of_mean)?, cfg.lambda_reg2)?;

    let total = tape.add(&tape.add(&triplet, &reg_select)?, &reg_diversity)?;
    Ok(SelectLoss {
        triplet,
        reg_select,
        reg_diversity,
        total,
        d_sel,
        d_dis,
    })
}
