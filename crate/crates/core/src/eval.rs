//! Target accuracy, selector quality against the oracle, sliced-Wasserstein
//! domain distances, the ablation runner and feature export.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::data::{DataError, PdaTask, TrainData};
use crate::models::{ModelBundle, ModelError};
use crate::trainer::{self, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("point sets have different widths ({0} vs {1})")]
    Width(usize, usize),
    #[error("{0} decisions for {1} samples")]
    Length(usize, usize),
    #[error("need at least {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("ablation row `{row}`, seed {seed}: {source}")]
    Row {
        row: String,
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("i/o: {0}")]
    Io(String),
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of labelled rows whose `F(G(x))` argmax equals the label.
/// Rows with no label are skipped.
pub fn evaluate_accuracy(
    models: &ModelBundle,
    target: &Tensor,
    labels: &[Option<usize>],
) -> Result<f64, EvalError> {
    if target.rows() != labels.len() {
        return Err(EvalError::Length(labels.len(), target.rows()));
    }
    let pred = argmax_rows(&models.classify(target)?);
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, l) in pred.iter().zip(labels) {
        if let Some(l) = l {
            total += 1;
            hit += usize::from(p == l);
        }
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(hit as f64 / total as f64)
}

/// Confusion counts with positive = shared class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

pub fn selector_metrics(selected: &[bool], oracle: &[bool]) -> Result<SelectorMetrics, EvalError> {
    if selected.len() != oracle.len() {
        return Err(EvalError::Length(selected.len(), oracle.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &o) in selected.iter().zip(oracle) {
        match (s, o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(SelectorMetrics {
        precision: ratio(tp, fp),
        recall: ratio(tp, fn_),
        tp,
        fp,
        fn_,
        tn,
    })
}

/// Noise-free selector decisions: select when the select logit is at least
/// the discard logit.
pub fn selector_decisions(models: &ModelBundle, source: &Tensor) -> Result<Vec<bool>, EvalError> {
    let z = models.selector_logits(source)?;
    Ok((0..z.rows()).map(|i| z.row(i)[0] >= z.row(i)[1]).collect())
}

/// Empirical quantile at level `u` in `[0, 1]` of sorted data, by linear
/// interpolation between order statistics.
fn quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = u * (n - 1) as f64;
    let lo = (pos.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 1-D Wasserstein-1 distance between two empirical distributions. Equal
/// sizes give the exact sorted-sample L1 mean; otherwise both quantile
/// functions are sampled at `max(n, m)` evenly spaced levels.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let n = a.len().max(b.len());
    let s: f64 = (0..n)
        .map(|k| {
            let u = k as f64 / (n - 1) as f64;
            (quantile(&a, u) - quantile(&b, u)).abs()
        })
        .sum();
    Ok(s / n as f64)
}

/// `count` directions drawn uniformly from the unit sphere in `dim` dimensions.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(), EvalError> {
    if x.is_empty() || y.is_empty() || x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(EvalError::Empty);
    }
    if x.cols() != y.cols() {
        return Err(EvalError::Width(x.cols(), y.cols()));
    }
    Ok(())
}

/// Sliced Wasserstein-1 over the given unit directions.
pub fn sliced_wasserstein_dirs(
    x: &Tensor,
    y: &Tensor,
    dirs: &[Vec<f64>],
) -> Result<f64, EvalError> {
    check_pair(x, y)?;
    if dirs.is_empty() {
        return Err(EvalError::Invalid("one projection".into()));
    }
    let mut total = 0.0;
    for d in dirs {
        if d.len() != x.cols() {
            return Err(EvalError::Width(d.len(), x.cols()));
        }
        total += wasserstein_1d(&project(x, d), &project(y, d))?;
    }
    Ok(total / dirs.len() as f64)
}

/// Sliced Wasserstein-1 with `n_projections` random directions.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64, EvalError> {
    check_pair(x, y)?;
    if n_projections == 0 {
        return Err(EvalError::Invalid("one projection".into()));
    }
    let dirs = random_directions(x.cols(), n_projections, rng);
    sliced_wasserstein_dirs(x, y, &dirs)
}

/// Feature-space distances of the selected, discarded and full source sets
/// to the target, and the first two normalized by the third.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub d_sel_t: Option<f64>,
    pub d_dis_t: Option<f64>,
    pub d_all_t: f64,
    pub norm_sel: Option<f64>,
    pub norm_dis: Option<f64>,
}

/// All three distances share one set of projection directions.
pub fn distance_report<R: Rng + ?Sized>(
    selected: Option<&Tensor>,
    discarded: Option<&Tensor>,
    all: &Tensor,
    target: &Tensor,
    n_projections: usize,
    rng: &mut R,
) -> Result<DistanceReport, EvalError> {
    check_pair(all, target)?;
    if n_projections == 0 {
        return Err(EvalError::Invalid("one projection".into()));
    }
    let dirs = random_directions(all.cols(), n_projections, rng);
    let d_all_t = sliced_wasserstein_dirs(all, target, &dirs)?;
    let part = |s: Option<&Tensor>| match s {
        Some(s) if !s.is_empty() => sliced_wasserstein_dirs(s, target, &dirs).map(Some),
        _ => Ok(None),
    };
    let d_sel_t = part(selected)?;
    let d_dis_t = part(discarded)?;
    let norm = |d: Option<f64>| d.filter(|_| d_all_t > 0.0).map(|v| v / d_all_t);
    Ok(DistanceReport {
        d_sel_t,
        d_dis_t,
        d_all_t,
        norm_sel: norm(d_sel_t),
        norm_dis: norm(d_dis_t),
    })
}

/// Rows of `x` where `mask` equals `keep`, or `None` when there are none.
pub fn rows_where(x: &Tensor, mask: &[bool], keep: bool) -> Option<Tensor> {
    let rows: Vec<&[f64]> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == keep)
        .map(|(i, _)| x.row(i))
        .collect();
    if rows.is_empty() {
        None
    } else {
        Tensor::from_rows(&rows).ok()
    }
}

/// One ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Vanilla,
    Select,
    SelectLabel,
    Full,
    HardPl,
    NoMixDom,
    NoMixCls,
    NoHausdorff,
}

impl AblationVariant {
    pub const CANONICAL: [AblationVariant; 4] =
        [Self::Vanilla, Self::Select, Self::SelectLabel, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Select => "select",
            Self::SelectLabel => "select+label",
            Self::Full => "slm",
            Self::HardPl => "hard-pl",
            Self::NoMixDom => "no-mix-dom",
            Self::NoMixCls => "no-mix-cls",
            Self::NoHausdorff => "no-hausdorff",
        }
    }

    /// The base config with this row's toggles applied.
    pub fn apply(self, base: &Config) -> Config {
        let mut c = base.clone();
        let (select, label, mix) = match self {
            Self::Vanilla => (false, false, false),
            Self::Select => (true, false, false),
            Self::SelectLabel => (true, true, false),
            _ => (true, true, true),
        };
        c.select.enabled = select;
        c.label.enabled = label;
        c.mix.enabled = mix;
        match self {
            Self::HardPl => c.label.sharpen.soft = false,
            Self::NoMixDom => c.mix.mix.dom = false,
            Self::NoMixCls => c.mix.mix.cls = false,
            Self::NoHausdorff => c.select.loss.triplet = false,
            _ => {}
        }
        c
    }
}

impl FromStr for AblationVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            Self::Vanilla,
            Self::Select,
            Self::SelectLabel,
            Self::Full,
            Self::HardPl,
            Self::NoMixDom,
            Self::NoMixCls,
            Self::NoHausdorff,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown ablation row `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub select: bool,
    pub label: bool,
    pub mix: bool,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains every variant on every seed. `task_for` supplies the task for a
/// seed; all rows of a seed see the same task and the same batch order.
pub fn run_ablation<T>(
    base: &Config,
    seeds: &[u64],
    variants: &[AblationVariant],
    mut task_for: T,
) -> Result<Vec<AblationRow>, EvalError>
where
    T: FnMut(u64) -> Result<PdaTask, DataError>,
{
    if seeds.len() < 2 {
        return Err(EvalError::Invalid("two seeds".into()));
    }
    let mut acc = vec![Vec::with_capacity(seeds.len()); variants.len()];
    for &seed in seeds {
        let task = task_for(seed)?;
        for (v, out) in variants.iter().zip(acc.iter_mut()) {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            cfg.train.eval_every = 0;
            let run = trainer::train(&cfg, &task, &mut |_| Ok(())).map_err(|e| EvalError::Row {
                row: v.name().into(),
                seed,
                source: Box::new(e),
            })?;
            out.push(run.report.final_accuracy);
        }
    }
    Ok(variants
        .iter()
        .zip(acc)
        .map(|(v, accuracies)| {
            let c = v.apply(base);
            let (mean, std) = mean_std(&accuracies);
            AblationRow {
                name: v.name().into(),
                select: c.select.enabled,
                label: c.label.enabled,
                mix: c.mix.enabled,
                seeds: seeds.to_vec(),
                accuracies,
                mean,
                std,
            }
        })
        .collect())
}

/// CSV `domain,label,selected,g0..` of `G` features for every source and
/// target row. Unknown target labels are written as -1; the selection column
/// is empty for target rows.
pub fn features_csv(
    models: &ModelBundle,
    data: &TrainData,
    target_labels: &[Option<usize>],
    selected: &[bool],
) -> Result<String, EvalError> {
    let fs = models.features(&data.source_matrix())?;
    let ft = models.features(&data.target_matrix())?;
    if selected.len() != fs.rows() {
        return Err(EvalError::Length(selected.len(), fs.rows()));
    }
    if target_labels.len() != ft.rows() {
        return Err(EvalError::Length(target_labels.len(), ft.rows()));
    }
    let k = fs.cols();
    let mut out = String::from("domain,label,selected");
    for j in 0..k {
        let _ = write!(out, ",g{j}");
    }
    out.push('\n');
    let mut push_row = |domain: &str, label: String, sel: &str, row: &[f64]| {
        let _ = write!(out, "{domain},{label},{sel}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    };
    for i in 0..fs.rows() {
        let sel = if selected[i] { "1" } else { "0" };
        push_row("source", data.source.labels[i].to_string(), sel, fs.row(i));
    }
    for i in 0..ft.rows() {
        let label = target_labels[i].map_or_else(|| "-1".to_string(), |l| l.to_string());
        push_row("target", label, "", ft.row(i));
    }
    Ok(out)
}

pub fn export_features(
    models: &ModelBundle,
    data: &TrainData,
    target_labels: &[Option<usize>],
    selected: &[bool],
    path: &Path,
) -> Result<(), EvalError> {
    let csv = features_csv(models, data, target_labels, selected)?;
    std::fs::write(path, csv).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}
