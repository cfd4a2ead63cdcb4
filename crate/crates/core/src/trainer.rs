//! Joint optimization loop: SGD with momentum and weight decay, cosine
//! learning-rate annealing, temperature / sharpening / gradient-reversal
//! schedules, metrics, and checkpoints.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, gather_rows, AutodiffError, Tape, Tensor};
use crate::config::{Config, ConfigError};
use crate::data::{standardize_per_domain, Batcher, DataError, PdaTask, TrainData};
use crate::eval::{self, DistanceReport, EvalError, SelectorMetrics};
use crate::label::{label_loss, pseudo_label_batch, LabelError, SharpenConfig};
use crate::mix::{build_mix_batches, mix_losses_from_logits, Labeled, MixError};
use crate::models::{MlpParams, ModelBundle, ModelError, ModelShapes};
use crate::objective::{
    adv_loss, entropy_weight, non_finite_term, smooth_labels, softmax_rows, supervised_loss,
    total_loss, EntropyWeights, LossBreakdown, LossTerms, ObjectiveError, StepCounts,
};
use crate::select::{partition_batch, select_loss, BatchPartition, SelectError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error("non-finite value at step {step} in term `{term}`: {detail}")]
    Numeric {
        step: usize,
        term: String,
        detail: String,
    },
    #[error("step {step}, term `{term}`: {source}")]
    Term {
        step: usize,
        term: &'static str,
        #[source]
        source: Box<TrainError>,
    },
    #[error("schedule time {t} outside [0, {steps}]")]
    ScheduleRange { t: usize, steps: usize },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("metrics sink: {0}")]
    Sink(#[from] io::Error),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

impl TrainError {
    /// True for faults caused by a non-finite value.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::Numeric { .. } => true,
            TrainError::Term { source, .. } => source.is_numeric(),
            _ => self
                .autodiff_cause()
                .is_some_and(|a| matches!(a, AutodiffError::NonFinite { .. })),
        }
    }

    fn autodiff_cause(&self) -> Option<&AutodiffError> {
        fn from_model(m: &ModelError) -> Option<&AutodiffError> {
            match m {
                ModelError::Autodiff(a) => Some(a),
                _ => None,
            }
        }
        fn from_objective(o: &ObjectiveError) -> Option<&AutodiffError> {
            match o {
                ObjectiveError::Autodiff(a) => Some(a),
                _ => None,
            }
        }
        match self {
            TrainError::Autodiff(a) => Some(a),
            TrainError::Model(m) => from_model(m),
            TrainError::Objective(o) => from_objective(o),
            TrainError::Select(SelectError::Autodiff(a)) => Some(a),
            TrainError::Select(SelectError::Model(m)) => from_model(m),
            TrainError::Label(LabelError::Autodiff(a)) => Some(a),
            TrainError::Label(LabelError::Model(m)) => from_model(m),
            TrainError::Mix(MixError::Autodiff(a)) => Some(a),
            TrainError::Mix(MixError::Model(m)) => from_model(m),
            TrainError::Mix(MixError::Objective(o)) => from_objective(o),
            _ => None,
        }
    }

    fn at(step: usize, term: &'static str, e: impl Into<TrainError>) -> TrainError {
        let e = e.into();
        if e.is_numeric() {
            TrainError::Numeric {
                step,
                term: term.into(),
                detail: e.to_string(),
            }
        } else {
            TrainError::Term {
                step,
                term,
                source: Box::new(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Tau,
    Alpha,
    GrlLambda,
}

/// Closed-form schedules over `steps` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub steps: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub alpha0: f64,
    pub alpha_min: f64,
    pub lr_min: f64,
    /// Fraction of `steps` at which tau and alpha reach their floors.
    pub anneal_fraction: f64,
}

impl Schedules {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            steps: cfg.train.steps,
            tau0: cfg.select.tau0,
            tau_min: cfg.select.tau_min,
            alpha0: cfg.label.sharpen.alpha,
            alpha_min: cfg.label.alpha_min,
            lr_min: cfg.train.lr_min,
            anneal_fraction: cfg.train.anneal_fraction,
        }
    }

    fn progress(&self, t: usize) -> Result<f64, TrainError> {
        if t > self.steps {
            return Err(TrainError::ScheduleRange {
                t,
                steps: self.steps,
            });
        }
        Ok(if self.steps == 0 {
            0.0
        } else {
            t as f64 / self.steps as f64
        })
    }

    /// `max(v_min, v0 * exp(-r p))` with `r = ln(v0 / v_min) / anneal_fraction`.
    fn decay(&self, v0: f64, v_min: f64, p: f64) -> f64 {
        if v0 <= v_min {
            return v0;
        }
        let r = (v0 / v_min).ln() / self.anneal_fraction;
        (v0 * (-r * p).exp()).max(v_min)
    }

    pub fn value(&self, which: ScheduleKind, t: usize) -> Result<f64, TrainError> {
        let p = self.progress(t)?;
        Ok(match which {
            ScheduleKind::Tau => self.decay(self.tau0, self.tau_min, p),
            ScheduleKind::Alpha => self.decay(self.alpha0, self.alpha_min, p),
            ScheduleKind::GrlLambda => 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0,
        })
    }

    /// Cosine annealing from `lr0` to `lr_min`.
    pub fn lr(&self, lr0: f64, t: usize) -> Result<f64, TrainError> {
        let p = self.progress(t)?;
        Ok(self.lr_min + 0.5 * (lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

pub fn schedule_value(s: &Schedules, which: ScheduleKind, t: usize) -> Result<f64, TrainError> {
    s.value(which, t)
}

/// Momentum buffers for one network, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub buffers: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptState {
    pub fn for_params(params: &MlpParams) -> Self {
        Self {
            buffers: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            steps: 0,
        }
    }
}

/// `v <- m v + g + wd w; w <- w - lr v`, per tensor.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut OptState,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(TrainError::Optimizer(format!(
            "{} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        if w.shape() != g.shape() || v.len() != w.len() {
            return Err(TrainError::Optimizer(format!(
                "shape {:?} vs grad {:?}",
                w.shape(),
                g.shape()
            )));
        }
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
    state.steps += 1;
    Ok(())
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub tau: f64,
    pub alpha: f64,
    pub grl_lambda: f64,
    /// Learning rate of the feature extractor.
    pub lr: f64,
    pub selected_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_accuracy: Option<f64>,
}

/// The training view of a task, standardized when configured.
pub fn prepare_data(cfg: &Config, task: &PdaTask) -> TrainData {
    let mut data = task.train.clone();
    if cfg.model.standardize {
        standardize_per_domain(&mut data);
    }
    data
}

pub fn model_shapes(cfg: &Config, data: &TrainData) -> ModelShapes {
    ModelShapes {
        input_dim: data.dim(),
        num_classes: data.num_classes,
        g_hidden: cfg.model.g_hidden.clone(),
        feature_dim: cfg.model.feature_dim,
        f_hidden: cfg.model.f_hidden.clone(),
        d_hidden: cfg.model.d_hidden.clone(),
        h_hidden: cfg.model.h_hidden.clone(),
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_GUMBEL: u64 = 2;
const STREAM_MIX: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Owns the parameters and optimizer state during training. Each random
/// stream (init, batches, Gumbel noise, mixup) is separate, so toggling a
/// module leaves the batch order and initialization unchanged.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: Config,
    shapes: ModelShapes,
    models: ModelBundle,
    opt: Vec<OptState>,
    schedules: Schedules,
    batcher: Batcher,
    batch_rng: ChaCha8Rng,
    gumbel_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, data: &TrainData) -> Result<Self, TrainError> {
        cfg.validate()?;
        let shapes = model_shapes(cfg, data);
        let models = ModelBundle::init(&shapes, &mut stream_rng(cfg.seed, STREAM_INIT))?;
        let opt = models
            .networks()
            .iter()
            .map(|(_, p)| OptState::for_params(p))
            .collect();
        let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH);
        let batcher = Batcher::new(data, cfg.train.batch_size, &mut batch_rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            shapes,
            models,
            opt,
            schedules: Schedules::from_config(cfg),
            batcher,
            batch_rng,
            gumbel_rng: stream_rng(cfg.seed, STREAM_GUMBEL),
            mix_rng: stream_rng(cfg.seed, STREAM_MIX),
            step: 0,
        })
    }

    pub fn models(&self) -> &ModelBundle {
        &self.models
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.cfg.clone(),
            shapes: self.shapes.clone(),
            models: self.models.clone(),
            opt: self.opt.clone(),
        }
    }

    /// One joint update. Reads only the training view of the task.
    pub fn step(&mut self, data: &TrainData) -> Result<MetricsRecord, TrainError> {
        let t = self.step;
        let cfg = &self.cfg;
        let tau = self.schedules.value(ScheduleKind::Tau, t)?;
        let alpha = self.schedules.value(ScheduleKind::Alpha, t)?;
        let lambda = self.schedules.value(ScheduleKind::GrlLambda, t)?;
        let (si, ti) = self.batcher.next_batch(&mut self.batch_rng);
        let xs = data.source_rows(&si);
        let xt = data.target_rows(&ti);
        let (b, bt) = (xs.rows(), xt.rows());
        let classes = data.num_classes;

        let tape = Tape::new();
        let m = self.models.attach(&tape);

        let part = if cfg.select.enabled {
            partition_batch(&tape, &m.h, &xs, tau, &mut self.gumbel_rng)
                .map_err(|e| TrainError::at(t, "select", e))?
        } else {
            BatchPartition::select_all(b)
        };

        let labels = if cfg.label.enabled {
            let sc = SharpenConfig {
                alpha,
                ..cfg.label.sharpen.clone()
            };
            pseudo_label_batch(&self.models, &xt, &sc).map_err(|e| TrainError::at(t, "label", e))?
        } else {
            vec![]
        };
        let accepted: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.accepted)
            .map(|(i, _)| i)
            .collect();

        let smoothed = part
            .selected
            .iter()
            .map(|&i| smooth_labels(data.source.labels[si[i]], classes, cfg.objective.epsilon))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TrainError::at(t, "sup", e))?;

        let mixed = if cfg.mix.enabled && (cfg.mix.mix.cls || cfg.mix.mix.dom) {
            let src: Vec<Labeled> = part
                .selected
                .iter()
                .zip(&smoothed)
                .map(|(&i, y)| Labeled {
                    input: xs.row(i),
                    label: y,
                })
                .collect();
            let tgt: Vec<Labeled> = accepted
                .iter()
                .map(|&i| Labeled {
                    input: xt.row(i),
                    label: &labels[i].probs,
                })
                .collect();
            build_mix_batches(&src, &tgt, &cfg.mix.mix, &mut self.mix_rng)
                .map_err(|e| TrainError::at(t, "mix", e))?
        } else {
            vec![]
        };

        // One shared forward pass over [source; target; mixed].
        let mut rows: Vec<&[f64]> = (0..b)
            .map(|i| xs.row(i))
            .chain((0..bt).map(|i| xt.row(i)))
            .collect();
        rows.extend(mixed.iter().map(|s| s.input.as_slice()));
        let x_all = Tensor::from_rows(&rows)?;
        let fwd = |e: ModelError| TrainError::at(t, "forward", e);
        let feats = m.g.forward(&tape, &x_all).map_err(fwd)?;
        let logits = m.f.forward(&tape, &feats).map_err(fwd)?;
        let reversed = tape
            .grl(&feats, lambda)
            .map_err(|e| TrainError::at(t, "forward", e))?;
        let dom = m.d.forward(&tape, &reversed).map_err(fwd)?;
        let src_logits = tape.slice_rows(&logits, 0, b)?;
        let tgt_logits = tape.slice_rows(&logits, b, b + bt)?;
        let src_dom = tape.slice_rows(&dom, 0, b)?;
        let tgt_dom = tape.slice_rows(&dom, b, b + bt)?;

        let mut terms = LossTerms::zeros();
        let sel_logits = if part.selected.is_empty() {
            None
        } else {
            Some(gather_rows(&tape, &src_logits, &part.selected)?)
        };
        terms.sup = supervised_loss(&tape, sel_logits.as_ref(), &smoothed)
            .map_err(|e| TrainError::at(t, "sup", e))?;

        let sel_dom = if part.selected.is_empty() {
            None
        } else {
            Some(gather_rows(&tape, &src_dom, &part.selected)?)
        };
        let weights = if cfg.objective.entropy_conditioning {
            EntropyWeights {
                source: sel_logits.as_ref().map_or(vec![], |l| {
                    softmax_rows(l).iter().map(|p| entropy_weight(p)).collect()
                }),
                target: softmax_rows(&tgt_logits)
                    .iter()
                    .map(|p| entropy_weight(p))
                    .collect(),
            }
        } else {
            EntropyWeights {
                source: vec![1.0; part.selected.len()],
                target: vec![1.0; bt],
            }
        };
        terms.adv = adv_loss(&tape, sel_dom.as_ref(), Some(&tgt_dom), &weights)
            .map_err(|e| TrainError::at(t, "adv", e))?;

        if cfg.select.enabled {
            // The triplet term trains the selector only; features enter as constants.
            let sf = tape.slice_rows(&feats, 0, b)?.detach();
            let tf = tape.slice_rows(&feats, b, b + bt)?.detach();
            let sl = select_loss(&tape, &part, &sf, &tf, &tgt_logits, &cfg.select.loss)
                .map_err(|e| TrainError::at(t, "select", e))?;
            terms.select = sl.total;
        }

        if !accepted.is_empty() {
            let acc_logits = gather_rows(&tape, &tgt_logits, &accepted)?;
            let acc_labels: Vec<_> = accepted.iter().map(|&i| &labels[i]).collect();
            terms.label = label_loss(&tape, Some(&acc_logits), &acc_labels)
                .map_err(|e| TrainError::at(t, "label", e))?;
            if cfg.label.ramp {
                terms.label = tape.scale(&terms.label, lambda)?;
            }
        }

        if !mixed.is_empty() {
            let end = b + bt + mixed.len();
            let ml = tape.slice_rows(&logits, b + bt, end)?;
            let md = tape.slice_rows(&dom, b + bt, end)?;
            let (cls, dm) = mix_losses_from_logits(&tape, &ml, &md, &mixed)
                .map_err(|e| TrainError::at(t, "mix_cls", e))?;
            if cfg.mix.mix.cls {
                terms.mix_cls = cls;
            }
            if cfg.mix.mix.dom {
                terms.mix_dom = dm;
            }
        }

        let counts = StepCounts {
            selected: part.selected.len(),
            discarded: part.discarded.len(),
            accepted: accepted.len(),
        };
        let (total, losses) = total_loss(&tape, &terms, &cfg.objective.weights, counts)
            .map_err(|e| TrainError::at(t, "total", e))?;
        if let Some(term) = non_finite_term(&losses) {
            return Err(TrainError::Numeric {
                step: t,
                term: term.into(),
                detail: "loss value".into(),
            });
        }

        let lrs = [
            cfg.train.lr_extractor,
            cfg.train.lr_classifier,
            cfg.train.lr_discriminator,
            cfg.train.lr_selector,
        ];
        let wds = [
            cfg.train.wd_other,
            cfg.train.wd_other,
            cfg.train.wd_other,
            cfg.train.wd_selector,
        ];
        let mut lr_now = [0.0; 4];
        for (k, &l) in lrs.iter().enumerate() {
            lr_now[k] = self.schedules.lr(l, t)?;
        }
        let momentum = cfg.train.momentum;
        if total.is_attached() {
            let grads = backward(&tape, &total).map_err(|e| TrainError::at(t, "backward", e))?;
            let attached = m.networks();
            for (k, (name, params)) in self.models.networks_mut().into_iter().enumerate() {
                let g: Vec<Tensor> = attached[k]
                    .1
                    .tensors()
                    .iter()
                    .map(|p| grads.wrt(p))
                    .collect::<Result<_, _>>()?;
                if g.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                    return Err(TrainError::Numeric {
                        step: t,
                        term: "gradient".into(),
                        detail: format!("network {name}"),
                    });
                }
                sgd_step(
                    &mut params.tensors_mut(),
                    &g,
                    lr_now[k],
                    momentum,
                    wds[k],
                    &mut self.opt[k],
                )?;
            }
        }
        self.step += 1;
        Ok(MetricsRecord {
            step: t,
            losses,
            tau,
            alpha,
            grl_lambda: lambda,
            lr: lr_now[0],
            selected_count: part.selected.len(),
            target_accuracy: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub trajectory: Vec<AccuracyPoint>,
    pub selector: SelectorMetrics,
    pub distances: DistanceReport,
    pub final_losses: Option<LossBreakdown>,
}

/// Evaluation of a parameter snapshot against the held-out store.
pub fn evaluate_models(
    cfg: &Config,
    models: &ModelBundle,
    data: &TrainData,
    task: &PdaTask,
) -> Result<(f64, SelectorMetrics, DistanceReport), EvalError> {
    let accuracy =
        eval::evaluate_accuracy(models, &data.target_matrix(), &task.eval.target_labels)?;
    let src = data.source_matrix();
    let decisions = if cfg.select.enabled {
        eval::selector_decisions(models, &src)?
    } else {
        vec![true; src.rows()]
    };
    let selector = eval::selector_metrics(&decisions, &task.eval.oracle)?;
    let fs = models.features(&src)?;
    let ft = models.features(&data.target_matrix())?;
    let sel = eval::rows_where(&fs, &decisions, true);
    let dis = eval::rows_where(&fs, &decisions, false);
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL);
    let distances = eval::distance_report(
        sel.as_ref(),
        dis.as_ref(),
        &fs,
        &ft,
        cfg.eval.projections,
        &mut rng,
    )?;
    Ok((accuracy, selector, distances))
}

pub struct TrainRun {
    pub report: TrainReport,
    pub trainer: Trainer,
}

/// Full training run. Every record is passed to `sink` as soon as it exists,
/// so a fault leaves the stream complete up to the failing step.
pub fn train(
    cfg: &Config,
    task: &PdaTask,
    sink: &mut dyn FnMut(&MetricsRecord) -> io::Result<()>,
) -> Result<TrainRun, TrainError> {
    let data = prepare_data(cfg, task);
    let mut trainer = Trainer::new(cfg, &data)?;
    let target = data.target_matrix();
    let initial_accuracy =
        eval::evaluate_accuracy(&trainer.models, &target, &task.eval.target_labels)?;
    let mut trajectory = vec![AccuracyPoint {
        step: 0,
        accuracy: initial_accuracy,
    }];
    let mut last = None;
    let steps = cfg.train.steps;
    for t in 0..steps {
        let mut rec = trainer.step(&data)?;
        let done = t + 1;
        let every = cfg.train.eval_every;
        if done == steps || (every > 0 && done % every == 0) {
            let acc = eval::evaluate_accuracy(&trainer.models, &target, &task.eval.target_labels)?;
            rec.target_accuracy = Some(acc);
            trajectory.push(AccuracyPoint {
                step: done,
                accuracy: acc,
            });
        }
        sink(&rec)?;
        last = Some(rec.losses);
    }
    let (final_accuracy, selector, distances) = evaluate_models(cfg, &trainer.models, &data, task)?;
    let report = TrainReport {
        steps,
        initial_accuracy,
        final_accuracy,
        trajectory,
        selector,
        distances,
        final_losses: last,
    };
    Ok(TrainRun { report, trainer })
}

pub const CHECKPOINT_FORMAT: &str = "slm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: usize,
    config: Config,
    shapes: ModelShapes,
    opt_steps: Vec<u64>,
    manifest: Vec<ManifestEntry>,
}

/// Parameters, optimizer state and the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: Config,
    pub shapes: ModelShapes,
    pub models: ModelBundle,
    pub opt: Vec<OptState>,
}

fn manifest(models: &ModelBundle) -> Vec<ManifestEntry> {
    let mut out = vec![];
    for prefix in ["", "momentum."] {
        for (name, p) in models.networks() {
            for (n, t) in p
                .names(&format!("{prefix}{name}"))
                .into_iter()
                .zip(p.tensors())
            {
                out.push(ManifestEntry {
                    name: n,
                    shape: t.shape().to_vec(),
                });
            }
        }
    }
    out
}

impl Checkpoint {
    /// JSON header line, then little-endian `f64` parameters followed by
    /// momentum buffers, both in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            shapes: self.shapes.clone(),
            opt_steps: self.opt.iter().map(|o| o.steps).collect(),
            manifest: manifest(&self.models),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, p) in self.models.networks() {
            for t in p.tensors() {
                t.data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        for o in &self.opt {
            for b in &o.buffers {
                b.iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let nl = bytes.iter().position(|&c| c == b'\n').ok_or_else(|| {
            CheckpointError::Manifest("missing header terminator (truncated file?)".into())
        })?;
        let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(CheckpointError::Header("not a checkpoint file".into()));
        }
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut models = ModelBundle::init(&header.shapes, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let expected = manifest(&models);
        if header.manifest != expected {
            return Err(CheckpointError::Manifest(
                "parameter manifest disagrees with the recorded shapes".into(),
            ));
        }
        let total: usize = expected
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let payload = &bytes[nl + 1..];
        if payload.len() != total * 8 {
            return Err(CheckpointError::Manifest(format!(
                "payload holds {} bytes, manifest needs {}",
                payload.len(),
                total * 8
            )));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for (_, p) in models.networks_mut() {
            for t in p.tensors_mut() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = vals.next().expect("length checked"));
            }
        }
        if header.opt_steps.len() != 4 {
            return Err(CheckpointError::Manifest(
                "expected four optimizer states".into(),
            ));
        }
        let mut opt = vec![];
        for ((_, p), steps) in models.networks().iter().zip(&header.opt_steps) {
            let buffers = p
                .tensors()
                .iter()
                .map(|t| {
                    (0..t.len())
                        .map(|_| vals.next().expect("length checked"))
                        .collect()
                })
                .collect();
            opt.push(OptState {
                buffers,
                steps: *steps,
            });
        }
        Ok(Checkpoint {
            step: header.step,
            config: header.config,
            shapes: header.shapes,
            models,
            opt,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = vec![];
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
