//! Partial-domain-adaptation tasks: synthetic generation, CSV ingestion and
//! epoch-wise batching.
//!
//! Training code only ever sees [`TrainData`]. Target labels and the
//! shared-class oracle live in [`EvalStore`], which only the evaluation
//! paths read.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Labeled source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Unlabeled target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub features: Vec<Vec<f64>>,
}

/// Everything a training step is allowed to read.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub source: SourceSet,
    pub target: TargetSet,
    pub num_classes: usize,
}

impl TrainData {
    pub fn dim(&self) -> usize {
        self.source.features.first().map_or(0, Vec::len)
    }

    pub fn source_rows(&self, idx: &[usize]) -> Tensor {
        rows_tensor(&self.source.features, idx)
    }

    pub fn target_rows(&self, idx: &[usize]) -> Tensor {
        rows_tensor(&self.target.features, idx)
    }

    pub fn source_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.source.features).expect("nonempty consistent source")
    }

    pub fn target_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.target.features).expect("nonempty consistent target")
    }
}

fn rows_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let picked: Vec<&[f64]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
    Tensor::from_rows(&picked).expect("nonempty consistent rows")
}

/// Evaluation-only ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStore {
    /// Per target sample; `None` when unknown.
    pub target_labels: Vec<Option<usize>>,
    /// Per source sample: class also present in the target.
    pub oracle: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdaTask {
    pub train: TrainData,
    pub eval: EvalStore,
    /// Classes known to occur in the target.
    pub shared: Vec<usize>,
}

impl PdaTask {
    pub fn samples(&self) -> impl Iterator<Item = LabeledSample> + '_ {
        let src = self
            .train
            .source
            .features
            .iter()
            .zip(&self.train.source.labels)
            .map(|(f, &l)| LabeledSample {
                features: f.clone(),
                label: Some(l),
                domain: Domain::Source,
            });
        let tgt = self
            .train
            .target
            .features
            .iter()
            .zip(&self.eval.target_labels)
            .map(|(f, &l)| LabeledSample {
                features: f.clone(),
                label: l,
                domain: Domain::Target,
            });
        src.chain(tgt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub shared: Vec<usize>,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 8,
            shared: vec![0, 1, 2, 3],
            source_per_class: 100,
            target_per_class: 100,
            rotation_deg: 0.0,
            translation: vec![0.57, 1.39],
            scale: 1.2,
            noise: 0.35,
            seed: 0,
        }
    }
}

/// Radius of the circle holding the class means.
pub const CLASS_RADIUS: f64 = 4.0;

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.shared.is_empty() {
            return bad("shared class list is empty".into());
        }
        if let Some(c) = self.shared.iter().find(|&&c| c >= self.classes) {
            return bad(format!("shared class {c} >= classes {}", self.classes));
        }
        let mut s = self.shared.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.shared.len() {
            return bad("shared class list has duplicates".into());
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return bad("per-class counts must be >= 1".into());
        }
        if self.translation.len() != self.dim && self.translation.len() != 2 {
            return bad(format!("translation needs 2 or {} entries", self.dim));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be > 0, got {}", self.scale));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return bad("shift must be finite".into());
        }
        Ok(())
    }

    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = CLASS_RADIUS * angle.cos();
        m[1] = CLASS_RADIUS * angle.sin();
        m
    }

    /// Rotation in the first two coordinates, then scaling, then translation.
    pub fn shift(&self, z: &[f64]) -> Vec<f64> {
        let th = self.rotation_deg.to_radians();
        let (s, c) = th.sin_cos();
        let mut x = z.to_vec();
        x[0] = c * z[0] - s * z[1];
        x[1] = s * z[0] + c * z[1];
        for (i, v) in x.iter_mut().enumerate() {
            *v = *v * self.scale + self.translation.get(i).copied().unwrap_or(0.0);
        }
        x
    }
}

fn gaussian(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let e: f64 = rng.sample(StandardNormal);
            m + sigma * e
        })
        .collect()
}

pub fn generate_synthetic_pda(spec: &TaskSpec) -> Result<PdaTask, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut src = SourceSet {
        features: vec![],
        labels: vec![],
    };
    let mut oracle = vec![];
    for c in 0..spec.classes {
        let mu = spec.class_mean(c);
        let shared = spec.shared.contains(&c);
        for _ in 0..spec.source_per_class {
            src.features.push(gaussian(&mut rng, &mu, spec.noise));
            src.labels.push(c);
            oracle.push(shared);
        }
    }
    let mut tgt = TargetSet { features: vec![] };
    let mut tlabels = vec![];
    for &c in &spec.shared {
        let mu = spec.class_mean(c);
        for _ in 0..spec.target_per_class {
            let z = gaussian(&mut rng, &mu, spec.noise);
            let x = spec.shift(&z);
            tgt.features.push(gaussian(&mut rng, &x, spec.noise));
            tlabels.push(Some(c));
        }
    }
    let mut shared = spec.shared.clone();
    shared.sort_unstable();
    Ok(PdaTask {
        train: TrainData {
            source: src,
            target: tgt,
            num_classes: spec.classes,
        },
        eval: EvalStore {
            target_labels: tlabels,
            oracle,
        },
        shared,
    })
}

/// Writes the task in the `domain,label,f0,...` format; unknown target
/// labels are written as `-1`.
pub fn write_csv(task: &PdaTask, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_csv_string(task))
        .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

pub fn to_csv_string(task: &PdaTask) -> String {
    let d = task.train.dim();
    let mut s = String::from("domain,label");
    for i in 0..d {
        let _ = write!(s, ",f{i}");
    }
    s.push('\n');
    for sample in task.samples() {
        let dom = match sample.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        let label = sample.label.map_or(-1, |l| l as i64);
        let _ = write!(s, "{dom},{label}");
        for v in &sample.features {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn load_csv_dataset(path: &Path) -> Result<PdaTask, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<PdaTask, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(DataError::Csv {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let header_err = |msg: &str| DataError::Csv {
        line: 1,
        msg: msg.to_string(),
    };
    if cols.len() < 3 || cols[0] != "domain" || cols[1] != "label" {
        return Err(header_err("header must be `domain,label,f0,...`"));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(header_err(&format!("expected column `f{i}`, found `{c}`")));
        }
    }
    let dim = cols.len() - 2;

    let mut src = SourceSet {
        features: vec![],
        labels: vec![],
    };
    let mut tgt = TargetSet { features: vec![] };
    let mut tlabels = vec![];
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Csv { line, msg };
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(err(format!(
                "expected {} fields, found {}",
                dim + 2,
                fields.len()
            )));
        }
        let label: i64 = fields[1]
            .parse()
            .map_err(|_| err(format!("label `{}` is not an integer", fields[1])))?;
        let feats = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("feature `{f}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match fields[0] {
            "source" => {
                if label < 0 {
                    return Err(err("source rows need a label".into()));
                }
                src.features.push(feats);
                src.labels.push(label as usize);
            }
            "target" => {
                if label < -1 {
                    return Err(err(format!("target label {label} (use -1 for unknown)")));
                }
                tgt.features.push(feats);
                tlabels.push((label >= 0).then_some(label as usize));
            }
            other => return Err(err(format!("unknown domain `{other}`"))),
        }
    }
    let last = text.lines().count();
    if src.features.is_empty() || tgt.features.is_empty() {
        return Err(DataError::Csv {
            line: last,
            msg: "need at least one source and one target row".into(),
        });
    }
    let num_classes = src.labels.iter().max().unwrap() + 1;
    if let Some(bad) = tlabels.iter().flatten().find(|&&l| l >= num_classes) {
        return Err(DataError::Csv {
            line: last,
            msg: format!("target label {bad} not in the source label space"),
        });
    }
    let mut shared: Vec<usize> = tlabels.iter().flatten().copied().collect();
    shared.sort_unstable();
    shared.dedup();
    let oracle = src
        .labels
        .iter()
        .map(|l| shared.binary_search(l).is_ok())
        .collect();
    Ok(PdaTask {
        train: TrainData {
            source: src,
            target: tgt,
            num_classes: num_classes.max(2),
        },
        eval: EvalStore {
            target_labels: tlabels,
            oracle,
        },
        shared,
    })
}

/// Per-domain standardization using statistics of the training split.
pub fn standardize_per_domain(data: &mut TrainData) {
    fn apply(rows: &mut [Vec<f64>]) {
        let n = rows.len() as f64;
        let d = rows[0].len();
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
            rows.iter_mut().for_each(|r| r[j] = (r[j] - mean) / sd);
        }
    }
    apply(&mut data.source.features);
    apply(&mut data.target.features);
}

/// Shuffled sampling without replacement; reshuffles when the pool runs out.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub fn take<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Paired source/target batch stream.
#[derive(Debug, Clone)]
pub struct Batcher {
    batch_size: usize,
    source: EpochSampler,
    target: EpochSampler,
}

impl Batcher {
    pub fn new<R: Rng + ?Sized>(
        data: &TrainData,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Spec("batch size must be >= 1".into()));
        }
        Ok(Self {
            batch_size,
            source: EpochSampler::new(data.source.features.len(), rng),
            target: EpochSampler::new(data.target.features.len(), rng),
        })
    }

    /// Index lists `(source, target)`, each of the configured batch size.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let s = self.source.take(self.batch_size, rng);
        let t = self.target.take(self.batch_size, rng);
        (s, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let task = generate_synthetic_pda(&TaskSpec::default()).unwrap();
        assert_eq!(task.train.source.features.len(), 800);
        assert_eq!(task.train.target.features.len(), 400);
        assert!(task.eval.target_labels.iter().all(|l| l.unwrap() < 4));
        assert_eq!(task.eval.oracle.iter().filter(|&&o| o).count(), 400);
    }

    #[test]
    fn identity_shift_without_noise_hits_means() {
        let spec = TaskSpec {
            rotation_deg: 0.0,
            translation: vec![0.0, 0.0],
            scale: 1.0,
            noise: 0.0,
            target_per_class: 3,
            ..Default::default()
        };
        let task = generate_synthetic_pda(&spec).unwrap();
        for (x, l) in task
            .train
            .target
            .features
            .iter()
            .zip(&task.eval.target_labels)
        {
            let mu = spec.class_mean(l.unwrap());
            assert!(x.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = to_csv_string(&generate_synthetic_pda(&TaskSpec::default()).unwrap());
        let b = to_csv_string(&generate_synthetic_pda(&TaskSpec::default()).unwrap());
        assert_eq!(a, b);
        let c = to_csv_string(
            &generate_synthetic_pda(&TaskSpec {
                seed: 1,
                ..Default::default()
            })
            .unwrap(),
        );
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation() {
        for bad in [
            TaskSpec {
                shared: vec![],
                ..Default::default()
            },
            TaskSpec {
                shared: vec![9],
                ..Default::default()
            },
            TaskSpec {
                source_per_class: 0,
                ..Default::default()
            },
            TaskSpec {
                dim: 1,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic_pda(&bad),
                Err(DataError::Spec(_))
            ));
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let ok = "domain,label,f0,f1\nsource,0,1.0,2.0\nsource,2,0.5,0.5\ntarget,-1,3.0,4.0\n";
        let task = parse_csv(ok).unwrap();
        assert_eq!(task.samples().count(), 3);
        assert_eq!(task.eval.target_labels, vec![None]);
        assert_eq!(task.train.num_classes, 3);

        let ragged = "domain,label,f0,f1\nsource,0,1.0,2.0\nsource,1,1.0\n";
        assert_eq!(
            parse_csv(ragged).unwrap_err(),
            DataError::Csv {
                line: 3,
                msg: "expected 4 fields, found 3".into()
            }
        );
        let nonnum = "domain,label,f0\nsource,0,abc\n";
        assert!(matches!(
            parse_csv(nonnum),
            Err(DataError::Csv { line: 2, .. })
        ));
        let unlabeled_src = "domain,label,f0\ntarget,0,1\nsource,-1,2\n";
        assert!(matches!(
            parse_csv(unlabeled_src),
            Err(DataError::Csv { line: 3, .. })
        ));
        let header = "dom,label,f0\n";
        assert!(matches!(
            parse_csv(header),
            Err(DataError::Csv { line: 1, .. })
        ));

        let gen = generate_synthetic_pda(&TaskSpec {
            source_per_class: 3,
            target_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let back = parse_csv(&to_csv_string(&gen)).unwrap();
        assert_eq!(back.train, gen.train);
        assert_eq!(back.eval, gen.eval);
    }

    #[test]
    fn full_batch_is_permutation_and_deterministic() {
        let task = generate_synthetic_pda(&TaskSpec {
            source_per_class: 2,
            target_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = Batcher::new(&task.train, 16, &mut rng).unwrap();
        let (s, t) = b.next_batch(&mut rng);
        let mut s2 = s.clone();
        s2.sort();
        assert_eq!(s2, (0..16).collect::<Vec<_>>());
        assert_eq!(t.len(), 16);
        let mut t2 = t.clone();
        t2.sort();
        assert_eq!(t2, (0..16).collect::<Vec<_>>());

        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = Batcher::new(&task.train, 5, &mut rng).unwrap();
            (0..10).map(|_| b.next_batch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(1), seq(1));
    }

    #[test]
    fn singleton_batches_cover_epoch() {
        let task = generate_synthetic_pda(&TaskSpec {
            source_per_class: 1,
            target_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Batcher::new(&task.train, 1, &mut rng).unwrap();
        let mut seen: Vec<usize> = (0..8).map(|_| b.next_batch(&mut rng).0[0]).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert!(Batcher::new(&task.train, 0, &mut rng).is_err());
    }

    #[test]
    fn standardization_centers_each_domain() {
        let mut task = generate_synthetic_pda(&TaskSpec::default()).unwrap();
        standardize_per_domain(&mut task.train);
        for rows in [&task.train.source.features, &task.train.target.features] {
            let m: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
            assert!(m.abs() < 1e-12);
        }
    }
}
