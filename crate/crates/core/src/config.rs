//! Flat `key = value` run configuration.
//!
//! Every field has a default, so an empty file is a valid config. The
//! effective config of a run is written back in the same format.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskSpec;
use crate::label::SharpenConfig;
use crate::mix::MixConfig;
use crate::objective::TermWeights;
use crate::select::SelectConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("`{key}`: {reason}")]
    Invariant { key: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub g_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub f_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub h_hidden: Vec<usize>,
    /// Per-domain input standardization.
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            g_hidden: vec![64, 64],
            feature_dim: 16,
            f_hidden: vec![],
            d_hidden: vec![64, 64],
            h_hidden: vec![64],
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectSection {
    pub enabled: bool,
    pub tau0: f64,
    pub tau_min: f64,
    pub loss: SelectConfig,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            enabled: true,
            tau0: 1.0,
            tau_min: 0.1,
            loss: SelectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSection {
    pub enabled: bool,
    pub alpha_min: f64,
    /// Scale the label term by the adversarial ramp, so that pseudo-labels
    /// only matter once the classifier has fit the source.
    pub ramp: bool,
    /// `sharpen.alpha` is the initial softness.
    pub sharpen: SharpenConfig,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha_min: 0.02,
            ramp: true,
            sharpen: SharpenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSection {
    pub enabled: bool,
    pub mix: MixConfig,
}

impl Default for MixSection {
    fn default() -> Self {
        Self {
            enabled: true,
            mix: MixConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSection {
    pub epsilon: f64,
    pub entropy_conditioning: bool,
    pub weights: TermWeights,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            entropy_conditioning: true,
            weights: TermWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_selector: f64,
    pub lr_classifier: f64,
    pub lr_extractor: f64,
    pub lr_discriminator: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub wd_selector: f64,
    pub wd_other: f64,
    /// Fraction of training after which tau and alpha sit at their floors.
    pub anneal_fraction: f64,
    /// Target accuracy is evaluated every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr_selector: 5e-3,
            lr_classifier: 5e-3,
            lr_extractor: 5e-4,
            lr_discriminator: 5e-4,
            lr_min: 0.0,
            momentum: 0.9,
            wd_selector: 1e-3,
            wd_other: 5e-4,
            anneal_fraction: 0.8,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub projections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { projections: 128 }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    /// CSV dataset; empty means the synthetic task.
    pub data_path: String,
    /// Synthetic task; its seed is taken from `seed`.
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub select: SelectSection,
    pub label: LabelSection,
    pub mix: MixSection,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    let v = value.trim();
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),* $(,)?) => {
        /// All accepted keys, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            /// Sets one dotted key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $( $key => { self.$($field).+ = config_keys!(@parse $kind, key, value); } )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// `(key, value)` pairs covering every field.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( ($key, config_keys!(@show $kind, self.$($field).+)) ),*]
            }
        }
    };
    (@parse scalar, $k:expr, $v:expr) => { parse($k, $v)? };
    (@parse list, $k:expr, $v:expr) => { parse_list($k, $v)? };
    (@show scalar, $e:expr) => { $e.to_string() };
    (@show list, $e:expr) => { join(&$e) };
}

config_keys! {
    "seed" => seed: scalar,
    "data.path" => data_path: scalar,
    "task.dim" => task.dim: scalar,
    "task.classes" => task.classes: scalar,
    "task.shared" => task.shared: list,
    "task.source_per_class" => task.source_per_class: scalar,
    "task.target_per_class" => task.target_per_class: scalar,
    "task.rotation_deg" => task.rotation_deg: scalar,
    "task.translation" => task.translation: list,
    "task.scale" => task.scale: scalar,
    "task.noise" => task.noise: scalar,
    "model.g_hidden" => model.g_hidden: list,
    "model.feature_dim" => model.feature_dim: scalar,
    "model.f_hidden" => model.f_hidden: list,
    "model.d_hidden" => model.d_hidden: list,
    "model.h_hidden" => model.h_hidden: list,
    "model.standardize" => model.standardize: scalar,
    "select.enabled" => select.enabled: scalar,
    "select.tau0" => select.tau0: scalar,
    "select.tau_min" => select.tau_min: scalar,
    "select.margin" => select.loss.margin: scalar,
    "select.lambda_s" => select.loss.lambda_s: scalar,
    "select.lambda_reg1" => select.loss.lambda_reg1: scalar,
    "select.lambda_reg2" => select.loss.lambda_reg2: scalar,
    "select.reg_form" => select.loss.reg_form: scalar,
    "select.triplet" => select.loss.triplet: scalar,
    "label.enabled" => label.enabled: scalar,
    "label.alpha0" => label.sharpen.alpha: scalar,
    "label.alpha_min" => label.alpha_min: scalar,
    "label.threshold" => label.sharpen.threshold: scalar,
    "label.soft" => label.sharpen.soft: scalar,
    "label.ramp" => label.ramp: scalar,
    "mix.enabled" => mix.enabled: scalar,
    "mix.beta_alpha" => mix.mix.beta_alpha: scalar,
    "mix.cls" => mix.mix.cls: scalar,
    "mix.dom" => mix.mix.dom: scalar,
    "objective.epsilon" => objective.epsilon: scalar,
    "objective.entropy_conditioning" => objective.entropy_conditioning: scalar,
    "objective.w_sup" => objective.weights.sup: scalar,
    "objective.w_adv" => objective.weights.adv: scalar,
    "objective.w_select" => objective.weights.select: scalar,
    "objective.w_label" => objective.weights.label: scalar,
    "objective.w_mix_cls" => objective.weights.mix_cls: scalar,
    "objective.w_mix_dom" => objective.weights.mix_dom: scalar,
    "train.steps" => train.steps: scalar,
    "train.batch_size" => train.batch_size: scalar,
    "train.lr_selector" => train.lr_selector: scalar,
    "train.lr_classifier" => train.lr_classifier: scalar,
    "train.lr_extractor" => train.lr_extractor: scalar,
    "train.lr_discriminator" => train.lr_discriminator: scalar,
    "train.lr_min" => train.lr_min: scalar,
    "train.momentum" => train.momentum: scalar,
    "train.wd_selector" => train.wd_selector: scalar,
    "train.wd_other" => train.wd_other: scalar,
    "train.anneal_fraction" => train.anneal_fraction: scalar,
    "train.eval_every" => train.eval_every: scalar,
    "eval.projections" => eval.projections: scalar,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment. Later lines win.
    pub fn parse_text(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: 0,
                text: kv.to_string(),
            });
        };
        self.set(k.trim(), v)
    }

    /// The config in its own file format.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The synthetic task spec with the run seed applied.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    /// Checks invariants; errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |key: &str, reason: String| {
            Err(ConfigError::Invariant {
                key: key.into(),
                reason,
            })
        };
        let nonneg = [
            ("select.margin", self.select.loss.margin),
            ("select.lambda_s", self.select.loss.lambda_s),
            ("select.lambda_reg1", self.select.loss.lambda_reg1),
            ("select.lambda_reg2", self.select.loss.lambda_reg2),
            ("train.lr_selector", self.train.lr_selector),
            ("train.lr_classifier", self.train.lr_classifier),
            ("train.lr_extractor", self.train.lr_extractor),
            ("train.lr_discriminator", self.train.lr_discriminator),
            ("train.lr_min", self.train.lr_min),
            ("train.wd_selector", self.train.wd_selector),
            ("train.wd_other", self.train.wd_other),
            ("objective.w_sup", self.objective.weights.sup),
            ("objective.w_adv", self.objective.weights.adv),
            ("objective.w_select", self.objective.weights.select),
            ("objective.w_label", self.objective.weights.label),
            ("objective.w_mix_cls", self.objective.weights.mix_cls),
            ("objective.w_mix_dom", self.objective.weights.mix_dom),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return inv(k, format!("must be a finite value >= 0, got {v}"));
            }
        }
        let positive = [
            ("select.tau0", self.select.tau0),
            ("select.tau_min", self.select.tau_min),
            ("label.alpha_min", self.label.alpha_min),
            ("mix.beta_alpha", self.mix.mix.beta_alpha),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return inv(k, format!("must be > 0, got {v}"));
            }
        }
        let a = self.label.sharpen.alpha;
        if !(a > 0.0 && a <= 1.0) {
            return inv("label.alpha0", format!("must be in (0, 1], got {a}"));
        }
        if self.label.alpha_min > a {
            return inv("label.alpha_min", "must not exceed label.alpha0".into());
        }
        if self.select.tau_min > self.select.tau0 {
            return inv("select.tau_min", "must not exceed select.tau0".into());
        }
        if !(0.0..1.0).contains(&self.label.sharpen.threshold) {
            return inv(
                "label.threshold",
                format!("must be in [0, 1), got {}", self.label.sharpen.threshold),
            );
        }
        if !(0.0..1.0).contains(&self.objective.epsilon) {
            return inv(
                "objective.epsilon",
                format!("must be in [0, 1), got {}", self.objective.epsilon),
            );
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return inv(
                "train.momentum",
                format!("must be in [0, 1), got {}", self.train.momentum),
            );
        }
        let f = self.train.anneal_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return inv(
                "train.anneal_fraction",
                format!("must be in (0, 1], got {f}"),
            );
        }
        if self.train.batch_size == 0 {
            return inv("train.batch_size", "must be >= 1".into());
        }
        if self.model.feature_dim == 0 {
            return inv("model.feature_dim", "must be >= 1".into());
        }
        for (k, v) in [
            ("model.g_hidden", &self.model.g_hidden),
            ("model.f_hidden", &self.model.f_hidden),
            ("model.d_hidden", &self.model.d_hidden),
            ("model.h_hidden", &self.model.h_hidden),
        ] {
            if v.iter().any(|&w| w == 0) {
                return inv(k, "widths must be >= 1".into());
            }
        }
        if self.model.g_hidden.is_empty() {
            return inv("model.g_hidden", "needs at least one hidden layer".into());
        }
        if self.model.h_hidden.is_empty() {
            return inv("model.h_hidden", "needs at least one hidden layer".into());
        }
        if self.model.d_hidden.len() != 2 {
            return inv(
                "model.d_hidden",
                "the discriminator has exactly two hidden layers".into(),
            );
        }
        if self.eval.projections == 0 {
            return inv("eval.projections", "must be >= 1".into());
        }
        if self.data_path.is_empty() {
            self.task_spec()
                .validate()
                .or_else(|e| inv("task", e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default_and_valid() {
        let c = Config::parse_text("").unwrap();
        assert_eq!(c, Config::default());
        c.validate().unwrap();
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = Config::default();
        c.set("select.reg_form", "binary").unwrap();
        c.set("task.shared", "0,2,5").unwrap();
        c.set("model.f_hidden", "7").unwrap();
        c.set("data.path", "x.csv").unwrap();
        let back = Config::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut c = Config::default();
        assert_eq!(
            c.set("select.nope", "1"),
            Err(ConfigError::UnknownKey("select.nope".into()))
        );
        assert!(matches!(
            c.set("train.steps", "-3"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            Config::parse_text("train.steps 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn invariant_errors_name_the_key() {
        let mut c = Config::default();
        c.apply_override("select.margin=-1").unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("select.margin"), "{e}");
    }

    #[test]
    fn comments_and_last_wins() {
        let c = Config::parse_text("# hi\ntrain.steps = 5 # inline\ntrain.steps=7\n").unwrap();
        assert_eq!(c.train.steps, 7);
    }
}
