use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{frozen_bn_coeffs, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Architecture of one layer function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Affine {
        input: usize,
        output: usize,
    },
    Relu,
    Batchnorm {
        dim: usize,
    },
    /// `relu(x + bn(fc(relu(bn(fc(x))))))` at constant width.
    ResidualBlock {
        dim: usize,
    },
    Softmax,
}

impl LayerSpec {
    /// Output width given the incoming width, or `None` if the input width is wrong.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        match *self {
            LayerSpec::Affine { input: i, output } => (i == input).then_some(output),
            LayerSpec::Relu | LayerSpec::Softmax => Some(input),
            LayerSpec::Batchnorm { dim } | LayerSpec::ResidualBlock { dim } => {
                (dim == input).then_some(dim)
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Relu => "relu",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::ResidualBlock { .. } => "residual-block",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Batch-norm mode. `Frozen` uses running statistics and is an affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    #[default]
    Train,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `output x input`; rows are output units.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = (0..output)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Affine {
            weight: Tensor::matrix(output, input, weight).expect("consistent shape"),
            bias: Tensor::vector(bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::affine(x, &self.weight, &self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Per-column `(scale, shift)` of the frozen map `x * scale + shift`.
    pub fn frozen_coeffs(&self) -> (Vec<f64>, Vec<f64>) {
        frozen_bn_coeffs(
            self.gamma.data(),
            self.beta.data(),
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (scale, shift) = self.frozen_coeffs();
        kernels::column_affine(x, &scale, &shift)
    }

    fn update_running(&mut self, stats: &BatchStats, n: usize) {
        let m = self.momentum;
        let unbias = if n > 1 {
            n as f64 / (n - 1) as f64
        } else {
            1.0
        };
        for k in 0..self.dim() {
            self.running_mean[k] = (1.0 - m) * self.running_mean[k] + m * stats.mean[k];
            self.running_var[k] = (1.0 - m) * self.running_var[k] + m * stats.var[k] * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub fc1: Affine,
    pub bn1: BatchNorm,
    pub fc2: Affine,
    pub bn2: BatchNorm,
}

impl ResidualBlock {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            fc1: Affine::init(dim, dim, rng),
            bn1: BatchNorm::new(dim),
            fc2: Affine::init(dim, dim, rng),
            bn2: BatchNorm::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = self.bn1.forward(&h)?;
        let h = kernels::relu(&h);
        let h = self.fc2.forward(&h)?;
        let h = self.bn2.forward(&h)?;
        Ok(kernels::relu(&x.as_matrix().add(&h)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Relu,
    BatchNorm(BatchNorm),
    Residual(ResidualBlock),
    Softmax,
}

/// Variables a layer registered on a tape, plus the batch statistics it
/// observed (training-mode batch-norm only).
pub(crate) struct TapeLayer {
    pub out: Var,
    pub pre_softmax: Option<Var>,
    pub stats: Vec<BatchStats>,
}

impl Layer {
    pub fn init(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        match *spec {
            LayerSpec::Affine { input, output } => Layer::Affine(Affine::init(input, output, rng)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Batchnorm { dim } => Layer::BatchNorm(BatchNorm::new(dim)),
            LayerSpec::ResidualBlock { dim } => Layer::Residual(ResidualBlock::init(dim, rng)),
            LayerSpec::Softmax => Layer::Softmax,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Affine(a) => LayerSpec::Affine {
                input: a.input_dim(),
                output: a.output_dim(),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::BatchNorm(b) => LayerSpec::Batchnorm { dim: b.dim() },
            Layer::Residual(r) => LayerSpec::ResidualBlock { dim: r.dim() },
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    /// Measurement forward (batch-norm frozen).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Affine(a) => a.forward(x),
            Layer::Relu => Ok(kernels::relu(x)),
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Residual(r) => r.forward(x),
            Layer::Softmax => Ok(kernels::softmax_rows(x)),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Affine(a) => vec![&a.weight, &a.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Residual(r) => vec![
                &r.fc1.weight,
                &r.fc1.bias,
                &r.bn1.gamma,
                &r.bn1.beta,
                &r.fc2.weight,
                &r.fc2.bias,
                &r.bn2.gamma,
                &r.bn2.beta,
            ],
            Layer::Relu | Layer::Softmax => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine(a) => vec![&mut a.weight, &mut a.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Residual(r) => vec![
                &mut r.fc1.weight,
                &mut r.fc1.bias,
                &mut r.bn1.gamma,
                &mut r.bn1.beta,
                &mut r.fc2.weight,
                &mut r.fc2.bias,
                &mut r.bn2.gamma,
                &mut r.bn2.beta,
            ],
            Layer::Relu | Layer::Softmax => vec![],
        }
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine(a) => vec![&mut a.weight],
            Layer::Residual(r) => vec![&mut r.fc1.weight, &mut r.fc2.weight],
            _ => vec![],
        }
    }

    pub(crate) fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Layer::BatchNorm(b) => vec![b],
            Layer::Residual(r) => vec![&mut r.bn1, &mut r.bn2],
            _ => vec![],
        }
    }

    /// Records this layer on `tape`. Parameters are registered in
    /// [`Layer::params`] order.
    pub(crate) fn forward_tape(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<TapeLayer> {
        let mut stats = Vec::new();
        let mut pre_softmax = None;
        let out = match self {
            Layer::Affine(a) => affine_tape(tape, x, a)?,
            Layer::Relu => tape.relu(x)?,
            Layer::BatchNorm(b) => bn_tape(tape, x, b, mode, &mut stats)?,
            Layer::Residual(r) => {
                let h = affine_tape(tape, x, &r.fc1)?;
                let h = bn_tape(tape, h, &r.bn1, mode, &mut stats)?;
                let h = tape.relu(h)?;
                let h = affine_tape(tape, h, &r.fc2)?;
                let h = bn_tape(tape, h, &r.bn2, mode, &mut stats)?;
                let s = tape.add(x, h)?;
                tape.relu(s)?
            }
            Layer::Softmax => {
                pre_softmax = Some(x);
                tape.softmax(x)?
            }
        };
        Ok(TapeLayer {
            out,
            pre_softmax,
            stats,
        })
    }

    pub(crate) fn absorb_stats(&mut self, stats: &[BatchStats], n: usize) {
        for (bn, s) in self.batchnorms_mut().into_iter().zip(stats) {
            bn.update_running(s, n);
        }
    }
}

fn affine_tape(tape: &mut Tape, x: Var, a: &Affine) -> Result<Var> {
    let w = tape.param(a.weight.clone());
    let b = tape.param(a.bias.clone());
    tape.affine(x, w, b)
}

fn bn_tape(
    tape: &mut Tape,
    x: Var,
    b: &BatchNorm,
    mode: BnMode,
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    let g = tape.param(b.gamma.clone());
    let be = tape.param(b.beta.clone());
    match mode {
        BnMode::Train => {
            let (y, s) = tape.batchnorm_train(x, g, be, b.eps)?;
            stats.push(s);
            Ok(y)
        }
        BnMode::Frozen => tape.batchnorm_frozen(x, g, be, &b.running_mean, &b.running_var, b.eps),
    }
}

pub(crate) fn check_width(layer: usize, spec: &LayerSpec, width: usize) -> Result<usize> {
    spec.output_dim(width).ok_or_else(|| {
        Error::shape(
            "layer",
            format!(
                "layer {layer} ({}) cannot take input width {width}",
                spec.kind()
            ),
        )
    })
}
