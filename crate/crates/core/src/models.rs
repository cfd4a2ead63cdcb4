//! MLP parameter containers for the extractor G, classifier F,
//! discriminator D and selector H, plus the gradient-reversal layer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("input width {got} does not match fan-in {expected}")]
    Width { expected: usize, got: usize },
    #[error("grl lambda {0} outside [0, 1]")]
    Lambda(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Widths from input to output. Hidden layers use relu; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    widths: Vec<usize>,
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::Spec(
                "need at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Spec(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// `input -> hidden... -> output`.
    pub fn chain(input: usize, hidden: &[usize], output: usize) -> Result<Self, ModelError> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        Self::new(w)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

/// Kaiming-uniform weights with bound `sqrt(6 / fan_in)`, zero biases.
pub fn init_params<R: Rng>(spec: &LayerSpec, rng: &mut R) -> MlpParams {
    let layers = spec
        .widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Linear {
                weight: Tensor::matrix(fan_out, fan_in, data).expect("valid init shape"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    MlpParams { layers }
}

impl MlpParams {
    pub fn in_width(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`tensors`](Self::tensors), prefixed by `prefix`.
    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    /// Copy whose tensors are leaves of `tape`.
    pub fn attach(&self, tape: &Tape) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: tape.leaf(&l.weight),
                    bias: tape.leaf(&l.bias),
                })
                .collect(),
        }
    }

    pub fn detach(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.detach(),
                    bias: l.bias.detach(),
                })
                .collect(),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        mlp_forward(self, tape, x)
    }
}

/// Affine + relu chain with a linear last layer.
pub fn mlp_forward(params: &MlpParams, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
    if x.shape().len() != 2 || x.cols() != params.in_width() {
        return Err(ModelError::Width {
            expected: params.in_width(),
            got: x.cols(),
        });
    }
    let last = params.layers.len() - 1;
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let wt = tape.transpose(&layer.weight)?;
        h = tape.add(&tape.matmul(&h, &wt)?, &layer.bias)?;
        if i < last {
            h = tape.relu(&h)?;
        }
    }
    Ok(h)
}

/// Gradient-reversal coefficient in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlLambda(f64);

impl GrlLambda {
    pub fn new(value: f64) -> Result<Self, ModelError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ModelError::Lambda(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn grl(tape: &Tape, x: &Tensor, lambda: GrlLambda) -> Result<Tensor, ModelError> {
    Ok(tape.grl(x, lambda.value())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShapes {
    pub input_dim: usize,
    pub num_classes: usize,
    pub g_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub f_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub h_hidden: Vec<usize>,
}

/// The four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Feature extractor: input -> features.
    pub g: MlpParams,
    /// Classifier head: features -> class logits.
    pub f: MlpParams,
    /// Domain discriminator: features -> one logit (source = 1).
    pub d: MlpParams,
    /// Selector: raw input -> (select, discard) logits.
    pub h: MlpParams,
}

impl ModelBundle {
    pub fn init<R: Rng>(shapes: &ModelShapes, rng: &mut R) -> Result<Self, ModelError> {
        if shapes.d_hidden.len() < 2 {
            return Err(ModelError::Spec(
                "discriminator needs two hidden layers".into(),
            ));
        }
        if shapes.g_hidden.is_empty() || shapes.h_hidden.is_empty() {
            return Err(ModelError::Spec(
                "extractor and selector need a hidden layer".into(),
            ));
        }
        let g = LayerSpec::chain(shapes.input_dim, &shapes.g_hidden, shapes.feature_dim)?;
        let f = LayerSpec::chain(shapes.feature_dim, &shapes.f_hidden, shapes.num_classes)?;
        let d = LayerSpec::chain(shapes.feature_dim, &shapes.d_hidden, 1)?;
        let h = LayerSpec::chain(shapes.input_dim, &shapes.h_hidden, 2)?;
        Ok(Self {
            g: init_params(&g, rng),
            f: init_params(&f, rng),
            d: init_params(&d, rng),
            h: init_params(&h, rng),
        })
    }

    pub fn networks(&self) -> [(&'static str, &MlpParams); 4] {
        [
            ("G", &self.g),
            ("F", &self.f),
            ("D", &self.d),
            ("H", &self.h),
        ]
    }

    pub fn networks_mut(&mut self) -> [(&'static str, &mut MlpParams); 4] {
        [
            ("G", &mut self.g),
            ("F", &mut self.f),
            ("D", &mut self.d),
            ("H", &mut self.h),
        ]
    }

    pub fn attach(&self, tape: &Tape) -> ModelBundle {
        ModelBundle {
            g: self.g.attach(tape),
            f: self.f.attach(tape),
            d: self.d.attach(tape),
            h: self.h.attach(tape),
        }
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|(_, p)| p.num_params()).sum()
    }

    /// Class logits `F(G(x))` with nothing recorded.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let feats = self.g.forward(&tape, x)?;
        self.f.forward(&tape, &feats)
    }

    /// Features `G(x)` with nothing recorded.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.g.forward(&Tape::new(), x)
    }

    /// Selector logits `H(x)` with nothing recorded.
    pub fn selector_logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.h.forward(&Tape::new(), x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic() {
        let spec = LayerSpec::chain(3, &[5], 2).unwrap();
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn init_biases_zero_and_bounded() {
        let spec = LayerSpec::chain(6, &[4], 3).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p
            .layers
            .iter()
            .all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        assert!(p.layers[0].weight.data().iter().all(|w| w.abs() <= 1.0));
        assert_eq!(p.num_params(), 6 * 4 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn layer_spec_rejects_bad_widths() {
        assert!(LayerSpec::new(vec![3]).is_err());
        assert!(LayerSpec::new(vec![3, 0, 2]).is_err());
    }

    fn single(w: Vec<f64>, rows: usize, cols: usize) -> MlpParams {
        MlpParams {
            layers: vec![Linear {
                weight: Tensor::matrix(rows, cols, w).unwrap(),
                bias: Tensor::zeros(&[rows]),
            }],
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = single(vec![0.0; 6], 2, 3);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = mlp_forward(&p, &Tape::new(), &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_through() {
        let p = single(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Tensor::matrix(1, 2, vec![-3.0, 7.5]).unwrap();
        assert_eq!(mlp_forward(&p, &Tape::new(), &x).unwrap().data(), x.data());
    }

    #[test]
    fn batch_rows_are_independent() {
        let spec = LayerSpec::chain(3, &[8, 8], 4).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 1.0, 2.0, 0.3, -1.2]).unwrap();
        let t = Tape::new();
        let both = mlp_forward(&p, &t, &x).unwrap();
        let r0 = mlp_forward(&p, &t, &Tensor::matrix(1, 3, x.row(0).to_vec()).unwrap()).unwrap();
        let r1 = mlp_forward(&p, &t, &Tensor::matrix(1, 3, x.row(1).to_vec()).unwrap()).unwrap();
        let cat: Vec<f64> = r0.data().iter().chain(r1.data()).copied().collect();
        assert_eq!(both.data(), &cat[..]);
    }

    #[test]
    fn width_mismatch_errors() {
        let p = single(vec![1.0; 4], 2, 2);
        let x = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        assert!(matches!(
            mlp_forward(&p, &Tape::new(), &x),
            Err(ModelError::Width { .. })
        ));
    }

    #[test]
    fn grl_lambda_zero_blocks_gradient() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = grl(&t, &x, GrlLambda::new(0.0).unwrap()).unwrap();
        assert_eq!(y.data(), x.data());
        let s = t.sum(&t.square(&y).unwrap()).unwrap();
        assert_eq!(
            backward(&t, &s).unwrap().wrt(&x).unwrap().data(),
            &[0.0, 0.0]
        );
        assert!(GrlLambda::new(1.5).is_err());
    }

    #[test]
    fn grl_scales_gradient_by_minus_lambda() {
        let spec = LayerSpec::chain(3, &[6], 1).unwrap();
        let d = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap();
        let grad = |lambda: Option<f64>| {
            let t = Tape::new();
            let x = t.leaf(&x0);
            let h = match lambda {
                Some(l) => t.grl(&x, l).unwrap(),
                None => x.clone(),
            };
            let out = t
                .sum(&t.square(&mlp_forward(&d, &t, &h).unwrap()).unwrap())
                .unwrap();
            backward(&t, &out).unwrap().wrt(&x).unwrap()
        };
        let plain = grad(None);
        let rev = grad(Some(0.37));
        for (p, r) in plain.data().iter().zip(rev.data()) {
            assert!((r + 0.37 * p).abs() < 1e-12);
        }
        // composite check: grl(x) with lambda=1 equals the gradient of -f
        let err = grad_check(
            |t, x| {
                let y = mlp_forward(&d, t, x).map_err(|e| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                t.sum(&t.square(&y)?)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn bundle_shapes() {
        let shapes = ModelShapes {
            input_dim: 2,
            num_classes: 8,
            g_hidden: vec![16, 16],
            feature_dim: 4,
            f_hidden: vec![],
            d_hidden: vec![8, 8],
            h_hidden: vec![8],
        };
        let m = ModelBundle::init(&shapes, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in [1, 5] {
            let x = Tensor::zeros(&[b, 2]);
            assert_eq!(m.classify(&x).unwrap().shape(), &[b, 8]);
        }
        assert_eq!(m.h.in_width(), 2);
        assert_eq!(m.h.out_width(), 2);
        assert_eq!(m.f.layers.len(), 1);
        assert_eq!(m.d.layers.len(), 3);
    }
}
