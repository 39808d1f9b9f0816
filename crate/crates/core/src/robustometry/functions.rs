//! Functions the estimator can probe: networks, single layers and a few
//! closed forms with known robustness.

use crate::datascope::LabeledDataset;
use crate::error::{Error, Result};
use crate::netfun::Network;
use crate::norm::Norm;
use crate::tensor::Tensor;

/// A map `R^input_dim -> R^k` evaluated row-wise on a batch.
pub trait VectorFunction: Sync {
    fn input_dim(&self) -> usize;
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor>;
}

impl<F: VectorFunction + ?Sized> VectorFunction for &F {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        (**self).eval_batch(batch)
    }
}

impl VectorFunction for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

/// `f^l` of a network on its own, taking `F^{l-1}` representations.
pub struct LayerFunction<'a> {
    net: &'a Network,
    layer: usize,
}

impl<'a> LayerFunction<'a> {
    pub fn new(net: &'a Network, layer: usize) -> Result<Self> {
        net.layer(layer)?;
        Ok(LayerFunction { net, layer })
    }
}

impl VectorFunction for LayerFunction<'_> {
    fn input_dim(&self) -> usize {
        self.net.width_after(self.layer - 1)
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.net.apply_layer(self.layer, batch)
    }
}

pub struct Identity {
    pub dim: usize,
}

impl VectorFunction for Identity {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.dim, "identity")?;
        Ok(batch.as_matrix())
    }
}

/// `x -> W x` with `W` of shape `out x in`.
pub struct LinearMap {
    pub matrix: Tensor,
}

impl LinearMap {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.expect_rank(2, "linear map")?;
        Ok(LinearMap { matrix })
    }

    pub fn scaling(dim: usize, c: f64) -> Self {
        LinearMap {
            matrix: Tensor::identity(dim).scale(c),
        }
    }
}

impl VectorFunction for LinearMap {
    fn input_dim(&self) -> usize {
        self.matrix.cols()
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.input_dim(), "linear map")?;
        batch.as_matrix().matmul(&self.matrix.transpose()?)
    }
}

/// Element-wise logistic function.
pub struct Sigmoid {
    pub dim: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl VectorFunction for Sigmoid {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.dim, "sigmoid")?;
        Ok(batch.as_matrix().map(sigmoid))
    }
}

pub struct Constant {
    pub input_dim: usize,
    pub value: Vec<f64>,
}

impl VectorFunction for Constant {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.input_dim, "constant")?;
        let n = batch.rows();
        Tensor::matrix(n, self.value.len(), self.value.repeat(n))
    }
}

/// `c * F`.
pub struct Scaled<F> {
    pub factor: f64,
    pub inner: F,
}

impl<F: VectorFunction> VectorFunction for Scaled<F> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.inner.eval_batch(batch)?.scale(self.factor))
    }
}

/// Row-wise closure adaptor.
pub struct RowFn<G> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: G,
}

impl<G: Fn(&[f64]) -> Vec<f64> + Sync> VectorFunction for RowFn<G> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.input_dim, "row function")?;
        let b = batch.as_matrix();
        let mut out = Vec::with_capacity(b.rows() * self.output_dim);
        for i in 0..b.rows() {
            let y = (self.f)(b.row(i));
            if y.len() != self.output_dim {
                return Err(Error::shape(
                    "row function",
                    format!("returned {} values, expected {}", y.len(), self.output_dim),
                ));
            }
            out.extend(y);
        }
        Tensor::matrix(b.rows(), self.output_dim, out)
    }
}

/// Hard two-class decision by side of the perpendicular bisector of
/// `[x, x']`. Output `[1, 0]` is the class of `x`, `[0, 1]` that of `x'`;
/// points on the bisector go to `x`.
pub struct MediatorClassifier {
    mid: Vec<f64>,
    normal: Vec<f64>,
}

pub fn mediator_classifier(x: &[f64], x_prime: &[f64]) -> Result<MediatorClassifier> {
    if x.len() != x_prime.len() || x.is_empty() {
        return Err(Error::shape(
            "mediator_classifier",
            format!("points have lengths {} and {}", x.len(), x_prime.len()),
        ));
    }
    if x == x_prime {
        return Err(Error::invalid(
            "mediator classifier needs two distinct points",
        ));
    }
    Ok(MediatorClassifier {
        mid: x.iter().zip(x_prime).map(|(a, b)| 0.5 * (a + b)).collect(),
        normal: x.iter().zip(x_prime).map(|(a, b)| b - a).collect(),
    })
}

impl MediatorClassifier {
    pub fn decide(&self, z: &[f64]) -> usize {
        let s: f64 = z
            .iter()
            .zip(&self.mid)
            .zip(&self.normal)
            .map(|((z, m), n)| (z - m) * n)
            .sum();
        usize::from(s > 0.0)
    }
}

impl VectorFunction for MediatorClassifier {
    fn input_dim(&self) -> usize {
        self.mid.len()
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.input_dim(), "mediator classifier")?;
        let b = batch.as_matrix();
        let mut out = Tensor::zeros(&[b.rows(), 2]);
        for i in 0..b.rows() {
            out.set(i, self.decide(b.row(i)), 1.0);
        }
        Ok(out)
    }
}

/// One-hot label of the nearest training example (ties go to the lowest index).
pub struct NearestNeighborClassifier<'a> {
    data: &'a LabeledDataset,
    norm: Norm,
}

pub fn nearest_neighbor_classifier(
    data: &LabeledDataset,
    norm: Norm,
) -> Result<NearestNeighborClassifier<'_>> {
    if data.is_empty() {
        return Err(Error::invalid(
            "nearest-neighbour classifier needs a nonempty dataset",
        ));
    }
    Ok(NearestNeighborClassifier { data, norm })
}

impl NearestNeighborClassifier<'_> {
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.data.len() {
            let d = self.norm.dist(z, self.data.input(i));
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

impl VectorFunction for NearestNeighborClassifier<'_> {
    fn input_dim(&self) -> usize {
        self.data.dim()
    }
    fn eval_batch(&self, batch: &Tensor) -> Result<Tensor> {
        check_cols(batch, self.input_dim(), "nearest-neighbour classifier")?;
        let b = batch.as_matrix();
        let mut out = Tensor::zeros(&[b.rows(), self.data.classes()]);
        for i in 0..b.rows() {
            out.set(i, self.data.labels()[self.nearest(b.row(i))], 1.0);
        }
        Ok(out)
    }
}

fn check_cols(batch: &Tensor, dim: usize, op: &'static str) -> Result<()> {
    let cols = if batch.rank() == 1 {
        batch.len()
    } else {
        batch.cols()
    };
    if batch.rank() > 2 || cols != dim {
        return Err(Error::shape(
            op,
            format!("expected width {dim}, got shape {:?}", batch.shape()),
        ));
    }
    Ok(())
}
