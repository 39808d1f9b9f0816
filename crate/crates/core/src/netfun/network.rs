use serde::{Deserialize, Serialize};

use super::layer::{check_width, BnMode, Layer, LayerSpec, TapeLayer};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Output tolerance measured on the training set after training:
/// `max_i ||F(x_i) - c^{x_i}||` under each norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub l2: f64,
    pub linf: f64,
}

/// `F = f^{depth} o ... o f^1`. Layer indices in the public API are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    pub delta: Option<Delta>,
    pub seed: u64,
    /// JSON echo of the training configuration, if any.
    pub config_echo: Option<String>,
}

/// Representations `F^0(x) = x, F^1(x), ..., F^depth(x)` of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    reps: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn from_reps(reps: Vec<Tensor>) -> Self {
        ActivationTrace { reps }
    }

    pub fn depth(&self) -> usize {
        self.reps.len() - 1
    }

    /// `F^l(x)`; `l = 0` is the input batch.
    pub fn at(&self, l: usize) -> &Tensor {
        &self.reps[l]
    }

    pub fn input(&self) -> &Tensor {
        &self.reps[0]
    }

    /// The `depth` tapped representations, `F^1 .. F^depth`.
    pub fn taps(&self) -> &[Tensor] {
        &self.reps[1..]
    }

    pub fn output(&self) -> &Tensor {
        self.reps.last().expect("trace holds the input at least")
    }
}

pub(crate) struct TapeForward {
    pub reps: Vec<Var>,
    pub logits: Var,
    pub params: Vec<Var>,
    pub stats: Vec<Vec<crate::autodiff::BatchStats>>,
}

impl Network {
    /// Builds a network with seeded uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` init.
    pub fn new(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut init = rng::stream(seed, &[0x1417]);
        let layers = specs.iter().map(|s| Layer::init(s, &mut init)).collect();
        let net = Network::from_layers(input_dim, layers)?;
        Ok(Network { seed, ..net })
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            let spec = layer.spec();
            if spec == LayerSpec::Softmax && i + 1 != layers.len() {
                return Err(Error::invalid(format!(
                    "softmax may only be the final layer (found at layer {})",
                    i + 1
                )));
            }
            width = check_width(i + 1, &spec, width)?;
        }
        Ok(Network {
            input_dim,
            layers,
            delta: None,
            seed: 0,
            config_echo: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.width_after(self.depth())
    }

    /// Width of `F^l`.
    pub fn width_after(&self, l: usize) -> usize {
        self.layers[..l].iter().fold(self.input_dim, |w, layer| {
            layer
                .spec()
                .output_dim(w)
                .expect("validated at construction")
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// 1-based layer access.
    pub fn layer(&self, l: usize) -> Result<&Layer> {
        self.check_layer_index(l)?;
        Ok(&self.layers[l - 1])
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    pub(crate) fn check_layer_index(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.depth() {
            return Err(Error::invalid(format!(
                "layer index {l} outside [1, {}]",
                self.depth()
            )));
        }
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.input_dim {
            return Err(Error::shape(
                "layer",
                format!(
                    "layer 1 expects width {}, batch has width {}",
                    self.input_dim,
                    batch.cols()
                ),
            ));
        }
        Ok(())
    }

    /// Applies `f^l` alone to a batch of `F^{l-1}` representations.
    pub fn apply_layer(&self, l: usize, rep: &Tensor) -> Result<Tensor> {
        let layer = self.layer(l)?;
        let expected = self.width_after(l - 1);
        if rep.cols() != expected {
            return Err(Error::shape(
                "layer",
                format!("layer {l} expects width {expected}, got {}", rep.cols()),
            ));
        }
        layer.forward(&rep.as_matrix())
    }

    /// `F^l(batch)`; `l = 0` returns the batch as a matrix.
    pub fn forward_prefix(&self, l: usize, batch: &Tensor) -> Result<Tensor> {
        if l > self.depth() {
            return Err(Error::invalid(format!(
                "prefix {l} beyond depth {}",
                self.depth()
            )));
        }
        self.check_input(batch)?;
        let mut x = batch.as_matrix();
        for layer in &self.layers[..l] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_prefix(self.depth(), batch)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<ActivationTrace> {
        self.check_input(batch)?;
        let mut reps = Vec::with_capacity(self.depth() + 1);
        reps.push(batch.as_matrix());
        for layer in &self.layers {
            let next = layer.forward(reps.last().expect("non-empty"))?;
            reps.push(next);
        }
        Ok(ActivationTrace { reps })
    }

    /// Argmax of the final representation; ties go to the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Records the whole network on a tape; one representation var per layer.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: BnMode,
    ) -> Result<TapeForward> {
        self.check_input(batch)?;
        let x = tape.constant(batch.as_matrix());
        let first_param = tape.params().len();
        let mut reps = vec![x];
        let mut logits = None;
        let mut stats = Vec::with_capacity(self.depth());
        for (i, layer) in self.layers.iter().enumerate() {
            tape.set_scope(Some(i + 1));
            let TapeLayer {
                out,
                pre_softmax,
                stats: s,
            } = layer.forward_tape(tape, *reps.last().expect("non-empty"), mode)?;
            if pre_softmax.is_some() {
                logits = pre_softmax;
            }
            reps.push(out);
            stats.push(s);
        }
        tape.set_scope(None);
        let out = *reps.last().expect("non-empty");
        Ok(TapeForward {
            logits: logits.unwrap_or(out),
            reps,
            params: tape.params()[first_param..].to_vec(),
            stats,
        })
    }
}

pub fn argmax_rows(out: &Tensor) -> Vec<usize> {
    (0..out.rows())
        .map(|i| {
            let row = out.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netfun::layer::{Affine, BatchNorm, ResidualBlock};
    use crate::tensor::kernels;

    fn affine(w: Tensor, b: Vec<f64>) -> Layer {
        Layer::Affine(Affine {
            weight: w,
            bias: Tensor::vector(b),
        })
    }

    #[test]
    fn identity_affine_trace() {
        let net = Network::from_layers(3, vec![affine(Tensor::identity(3), vec![0.0; 3])]).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let tr = net.forward_trace(&x).unwrap();
        assert_eq!(tr.depth(), 1);
        assert_eq!(tr.at(1), &x);
    }

    #[test]
    fn half_scale_then_relu() {
        let net = Network::from_layers(
            2,
            vec![
                affine(Tensor::identity(2).scale(0.5), vec![0.0; 2]),
                Layer::Relu,
            ],
        )
        .unwrap();
        let tr = net
            .forward_trace(&Tensor::from_rows(&[[2.0, -2.0]]).unwrap())
            .unwrap();
        assert_eq!(tr.taps().len(), 2);
        assert_eq!(tr.at(1).data(), &[1.0, -1.0]);
        assert_eq!(tr.at(2).data(), &[1.0, 0.0]);
    }

    #[test]
    fn residual_trace_matches_manual_recompute() {
        let specs = [
            LayerSpec::Affine {
                input: 4,
                output: 6,
            },
            LayerSpec::ResidualBlock { dim: 6 },
            LayerSpec::ResidualBlock { dim: 6 },
            LayerSpec::ResidualBlock { dim: 6 },
            LayerSpec::Affine {
                input: 6,
                output: 3,
            },
            LayerSpec::Softmax,
        ];
        let mut net = Network::new(4, &specs, 11).unwrap();
        // non-trivial running statistics
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            for (j, bn) in layer.batchnorms_mut().into_iter().enumerate() {
                for k in 0..bn.dim() {
                    bn.running_mean[k] = 0.1 * (i + j + k) as f64 - 0.3;
                    bn.running_var[k] = 0.5 + 0.05 * k as f64;
                }
            }
        }
        let mut r = rng::stream(5, &[]);
        use rand::Rng;
        let x = Tensor::matrix(5, 4, (0..20).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let tr = net.forward_trace(&x).unwrap();

        let manual_bn = |bn: &BatchNorm, h: &Tensor| {
            let mut out = h.clone();
            for i in 0..h.rows() {
                for k in 0..h.cols() {
                    let s = bn.gamma.data()[k] / (bn.running_var[k] + bn.eps).sqrt();
                    let t = bn.beta.data()[k] - bn.running_mean[k] * s;
                    out.set(i, k, h.get(i, k) * s + t);
                }
            }
            out
        };
        let manual_block = |b: &ResidualBlock, x: &Tensor| {
            let h = kernels::affine(x, &b.fc1.weight, &b.fc1.bias).unwrap();
            let h = kernels::relu(&manual_bn(&b.bn1, &h));
            let h = kernels::affine(&h, &b.fc2.weight, &b.fc2.bias).unwrap();
            let h = manual_bn(&b.bn2, &h);
            let mut s = x.clone();
            for (a, v) in s.data_mut().iter_mut().zip(h.data()) {
                *a = (*a + v).max(0.0);
            }
            s
        };
        for l in 1..=net.depth() {
            let prev = tr.at(l - 1);
            let expect = match &net.layers()[l - 1] {
                Layer::Residual(b) => manual_block(b, prev),
                other => other.forward(prev).unwrap(),
            };
            assert_eq!(tr.at(l), &expect, "layer {l}");
        }
        assert_eq!(tr.output(), &net.forward(&x).unwrap());
    }

    #[test]
    fn softmax_only_last() {
        let err = Network::new(
            2,
            &[
                LayerSpec::Softmax,
                LayerSpec::Affine {
                    input: 2,
                    output: 2,
                },
            ],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("softmax"));
    }

    #[test]
    fn inconsistent_widths_name_layer() {
        let err = Network::new(
            3,
            &[
                LayerSpec::Affine {
                    input: 3,
                    output: 4,
                },
                LayerSpec::Affine {
                    input: 5,
                    output: 2,
                },
            ],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");
    }

    #[test]
    fn batch_width_mismatch_rejected() {
        let net = Network::new(3, &[LayerSpec::Relu], 0).unwrap();
        let err = net.forward_trace(&Tensor::zeros(&[2, 4])).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let out = Tensor::from_rows(&[[0.1, 0.7, 0.2], [0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&out), vec![1, 0]);
    }

    #[test]
    fn frozen_batchnorm_is_affine() {
        let mut bn = BatchNorm::new(3);
        bn.gamma = Tensor::vector(vec![1.5, -0.5, 2.0]);
        bn.beta = Tensor::vector(vec![0.1, 0.2, -0.3]);
        bn.running_mean = vec![0.3, -1.0, 2.0];
        bn.running_var = vec![0.25, 4.0, 1.0];
        let f = |x: &Tensor| bn.forward(x).unwrap();
        let mut r = rng::stream(9, &[]);
        use rand::Rng;
        let mut v =
            || Tensor::matrix(1, 3, (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let (x, e1, e2) = (v(), v(), v());
        let d = |e: &Tensor| f(&x.add(e).unwrap()).sub(&f(&x)).unwrap();
        let lhs = d(&e1.add(&e2).unwrap());
        let rhs = d(&e1).add(&d(&e2)).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
