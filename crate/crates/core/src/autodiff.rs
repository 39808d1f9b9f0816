//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Operations are recorded in execution order; [`Tape::backward`] walks them
//! once in reverse. ReLU and `abs` use subgradient 0 at 0.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        centered_scaled: Tensor,
        scale: Vec<f64>,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    PairwiseDistance(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    scope: Option<usize>,
}

/// Batch-norm statistics produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Layer index attached to non-finite errors raised while it is set.
    pub fn set_scope(&mut self, layer: Option<usize>) {
        self.scope = layer;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that does not receive a parameter gradient slot.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf)
    }

    /// Records a trainable value; its gradient is returned by [`Gradients::params`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push_unchecked(t, Op::Leaf);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                layer: self.scope,
            });
        }
        Ok(self.push_unchecked(value, op))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        self.push("affine", y, Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        self.push("matmul", y, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push("add", y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push("sub", y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        self.push("mul", y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.value(a).scale(c);
        self.push("scale", y, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = kernels::relu(self.value(a));
        self.push("relu", y, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| v * v);
        self.push("square", y, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(f64::abs);
        self.push("abs", y, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push("sum", y, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", y, Op::Mean(a))
    }

    /// Batch-norm with batch statistics (biased variance).
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("width {c}, gamma {:?}", self.value(gamma).shape()),
            ));
        }
        let (mean, var) = kernels::column_mean_var(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xhat = kernels::column_affine(xv, &inv_std, &shift)?;
        let y = kernels::column_affine(&xhat, self.value(gamma).data(), self.value(beta).data())?;
        let v = self.push(
            "batchnorm",
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch-norm with fixed running statistics: a per-column affine map.
    pub fn batchnorm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (scale, shift) = frozen_bn_coeffs(
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let xv = self.value(x);
        let y = kernels::column_affine(xv, &scale, &shift)?;
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let neg: Vec<f64> = running_mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
        let centered_scaled = kernels::column_affine(xv, &inv, &neg)?;
        self.push(
            "batchnorm",
            y,
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                centered_scaled,
                scale,
            },
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(a));
        self.push("softmax", y, Op::Softmax(a))
    }

    /// Mean over rows of `-sum_c t_c log softmax(z)_c`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        z.as_matrix()
            .expect_same_shape(&targets.as_matrix(), "softmax_cross_entropy")?;
        let (n, c) = (z.rows(), z.cols());
        let probs = kernels::softmax_rows(z);
        let mut loss = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for k in 0..c {
                let t = targets.get(i, k);
                if t != 0.0 {
                    loss -= t * (row[k] - lse);
                }
            }
        }
        loss /= n as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.as_matrix(),
                probs,
            },
        )
    }

    /// `n x d -> n x n` matrix of row-to-row L2 distances.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        let y = kernels::pairwise_l2(self.value(a));
        self.push("pairwise_distance", y, Op::PairwiseDistance(a))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (target, contrib) in self.local_grads(&node.op, &node.value, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.accumulate(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|p| {
                grads[p.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*p).shape()))
            })
            .collect();
        Ok(Gradients { all: grads, params })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |var: Var| self.value(var);
        Ok(match op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let gm = g.as_matrix();
                let dx = gm.matmul(wv)?.reshape(xv.shape().to_vec())?;
                let dw = gm.transpose()?.matmul(&xv.as_matrix())?;
                let db = column_sums(&gm).reshape(v(*b).shape().to_vec())?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&v(*b).transpose()?)?;
                let db = v(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let da = g.zip_map(v(*b), "mul", |p, q| p * q)?;
                let db = g.zip_map(v(*a), "mul", |p, q| p * q)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => {
                let d = g.zip_map(v(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                vec![(*a, d)]
            }
            Op::Square(a) => vec![(*a, g.zip_map(v(*a), "square", |gi, x| 2.0 * x * gi)?)],
            Op::Abs(a) => {
                let d = g.zip_map(v(*a), "abs", |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })?;
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(v(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                vec![(*a, Tensor::filled(v(*a).shape(), g.item() / n))]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = g.as_matrix();
                let (n, c) = (gm.rows(), gm.cols());
                let gam = v(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for i in 0..n {
                    for k in 0..c {
                        let dy = gm.get(i, k);
                        let xh = xhat.get(i, k);
                        dgamma[k] += dy * xh;
                        dbeta[k] += dy;
                        let dxh = dy * gam[k];
                        sum_dxhat[k] += dxh;
                        sum_dxhat_xhat[k] += dxh * xh;
                    }
                }
                let nf = n as f64;
                let mut dx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    for k in 0..c {
                        let dxh = gm.get(i, k) * gam[k];
                        let val = inv_std[k] / nf
                            * (nf * dxh - sum_dxhat[k] - xhat.get(i, k) * sum_dxhat_xhat[k]);
                        dx.set(i, k, val);
                    }
                }
                vec![
                    (*x, dx.reshape(v(*x).shape().to_vec())?),
                    (*gamma, Tensor::new(v(*gamma).shape().to_vec(), dgamma)?),
                    (*beta, Tensor::new(v(*beta).shape().to_vec(), dbeta)?),
                ]
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                centered_scaled,
                scale,
            } => {
                let gm = g.as_matrix();
                let (n, c) = (gm.rows(), gm.cols());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    for k in 0..c {
                        let dy = gm.get(i, k);
                        dgamma[k] += dy * centered_scaled.get(i, k);
                        dbeta[k] += dy;
                        dx.set(i, k, dy * scale[k]);
                    }
                }
                vec![
                    (*x, dx.reshape(v(*x).shape().to_vec())?),
                    (*gamma, Tensor::new(v(*gamma).shape().to_vec(), dgamma)?),
                    (*beta, Tensor::new(v(*beta).shape().to_vec(), dbeta)?),
                ]
            }
            Op::Softmax(a) => {
                let gm = g.as_matrix();
                let c = out.cols();
                let mut d = Tensor::zeros(&[out.rows(), c]);
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = gm.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        d.set(i, k, y[k] * (gi[k] - dot));
                    }
                }
                vec![(*a, d.reshape(v(*a).shape().to_vec())?)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, c) = (probs.rows(), probs.cols());
                let scale = g.item() / n as f64;
                let mut d = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let tsum: f64 = targets.row(i).iter().sum();
                    for k in 0..c {
                        d.set(i, k, scale * (probs.get(i, k) * tsum - targets.get(i, k)));
                    }
                }
                vec![(*logits, d.reshape(v(*logits).shape().to_vec())?)]
            }
            Op::PairwiseDistance(a) => {
                let x = v(*a);
                let (n, dim) = (x.rows(), x.cols());
                let mut d = vec![0.0; n * dim];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out.get(i, j);
                        if i == j || dist == 0.0 {
                            continue;
                        }
                        let w = (g.get(i, j) + g.get(j, i)) / dist;
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (x.row(i), x.row(j));
                        for k in 0..dim {
                            d[i * dim + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
        })
    }
}

fn column_sums(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut s = vec![0.0; c];
    for i in 0..m.rows() {
        for (a, b) in s.iter_mut().zip(m.row(i)) {
            *a += b;
        }
    }
    Tensor::vector(s)
}

/// Per-column `(scale, shift)` of a frozen batch-norm.
pub(crate) fn frozen_bn_coeffs(
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    (scale, shift)
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    all: Vec<Option<Tensor>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (zeros if unreached).
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        self.all[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Gradients of [`Tape::param`] values, in registration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }
}

/// Builds a scalar program on a fresh tape: `(tape, input, params) -> loss`.
pub trait Program: Fn(&mut Tape, Var, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, Var, &[Var]) -> Result<Var>> Program for F {}

/// Runs `program` forward and backward; returns the loss and one gradient
/// per entry of `params`.
pub fn forward_backward<P: Program>(
    program: &P,
    input: &Tensor,
    params: &[Tensor],
) -> Result<(f64, Vec<Tensor>)> {
    if !input.is_finite() {
        return Err(Error::invalid("input contains non-finite values"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let pv: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = program(&mut tape, x, &pv)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::shape(
            "forward_backward",
            format!("program must be scalar-valued, got {:?}", value.shape()),
        ));
    }
    let value = value.item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.into_params()))
}

fn forward_only<P: Program>(program: &P, input: &Tensor, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let pv: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = program(&mut tape, x, &pv)?;
    Ok(tape.value(loss).item())
}

/// Largest `|analytic - central| / max(|analytic|, 1e-12)` over every
/// parameter entry, with central differences of half-width `step`.
pub fn finite_diff_check<P: Program>(
    program: &P,
    input: &Tensor,
    params: &[Tensor],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = forward_backward(program, input, params)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            probe[p].data_mut()[k] = orig + step;
            let up = forward_only(program, input, &probe)
                .map_err(|e| Error::Estimation(format!("perturbed forward failed: {e}")))?;
            probe[p].data_mut()[k] = orig - step;
            let down = forward_only(program, input, &probe)
                .map_err(|e| Error::Estimation(format!("perturbed forward failed: {e}")))?;
            probe[p].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check",
                    layer: None,
                });
            }
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
