//! Per-layer distance graphs, their combinatorial Laplacian, class-indicator
//! smoothness `Tr(S^T L S)` and the layer-to-layer variation penalty.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::netfun::ActivationTrace;
use crate::norm::Norm;
use crate::tensor::Tensor;

const TILE: usize = 64;

/// Weighted graph over a batch: `A_ij = ||F^l(x_i) - F^l(x_j)||`, `L = D - A`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceGraph {
    pub adjacency: Tensor,
    pub degree: Vec<f64>,
    pub laplacian: Tensor,
    pub layer: usize,
    pub norm: Norm,
}

impl DistanceGraph {
    pub fn size(&self) -> usize {
        self.degree.len()
    }

    /// `v^T L v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let n = self.size();
        let mut acc = 0.0;
        for i in 0..n {
            let row = self.laplacian.row(i);
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * v[j];
            }
            acc += v[i] * s;
        }
        acc
    }
}

/// Stacked one-hot rows `c^{x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIndicatorMatrix {
    s: Tensor,
    labels: Vec<usize>,
}

impl ClassIndicatorMatrix {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(Error::invalid("indicator matrix needs labels and classes"));
        }
        let mut s = Tensor::zeros(&[labels.len(), classes]);
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::invalid(format!(
                    "label {c} of example {i} outside [0, {classes})"
                )));
            }
            s.set(i, c, 1.0);
        }
        Ok(ClassIndicatorMatrix {
            s,
            labels: labels.to_vec(),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.s
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.s.cols()
    }

    /// `M_ij = 1` where examples `i` and `j` have different classes.
    fn cross_class_mask(&self) -> Tensor {
        let n = self.rows();
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if self.labels[i] != self.labels[j] {
                    m.set(i, j, 1.0);
                }
            }
        }
        m
    }
}

/// Builds the distance graph of a batch of representations (one row each).
pub fn distance_graph(reps: &Tensor, layer: usize, norm: Norm) -> Result<DistanceGraph> {
    let n = reps.rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "distance graph needs at least 2 examples, got {n}"
        )));
    }
    let mut a = Tensor::zeros(&[n, n]);
    for bi in (0..n).step_by(TILE) {
        for bj in (bi..n).step_by(TILE) {
            for i in bi..(bi + TILE).min(n) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + TILE).min(n) {
                    let d = norm.dist(reps.row(i), reps.row(j));
                    a.set(i, j, d);
                    a.set(j, i, d);
                }
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let mut l = a.scale(-1.0);
    for (i, d) in degree.iter().enumerate() {
        l.set(i, i, *d);
    }
    Ok(DistanceGraph {
        adjacency: a,
        degree,
        laplacian: l,
        layer,
        norm,
    })
}

/// Distance graph of `F^layer` taken from a trace (`layer = 0` is the input).
pub fn pairwise_distance_matrix(
    trace: &ActivationTrace,
    layer: usize,
    norm: Norm,
) -> Result<DistanceGraph> {
    if layer > trace.depth() {
        return Err(Error::invalid(format!(
            "layer {layer} beyond trace depth {}",
            trace.depth()
        )));
    }
    distance_graph(trace.at(layer), layer, norm)
}

/// `Sigma = Tr(S^T L S) = sum_c s_c^T L s_c`.
pub fn smoothness(graph: &DistanceGraph, s: &ClassIndicatorMatrix) -> Result<f64> {
    if s.rows() != graph.size() {
        return Err(Error::shape(
            "smoothness",
            format!("S has {} rows, graph has {} nodes", s.rows(), graph.size()),
        ));
    }
    let sm = s.matrix();
    let mut total = 0.0;
    for c in 0..s.classes() {
        let col: Vec<f64> = (0..s.rows()).map(|i| sm.get(i, c)).collect();
        total += graph.quadratic_form(&col);
    }
    Ok(total)
}

/// `Sigma^l` for each requested layer of a trace.
pub fn layer_sigmas(
    trace: &ActivationTrace,
    s: &ClassIndicatorMatrix,
    layers: &[usize],
    norm: Norm,
) -> Result<Vec<f64>> {
    layers
        .iter()
        .map(|&l| smoothness(&pairwise_distance_matrix(trace, l, norm)?, s))
        .collect()
}

/// `sum_l |Sigma^{l+1} - Sigma^l|`.
pub fn variation(sigmas: &[f64]) -> f64 {
    sigmas.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Variation penalty over layers `1..=depth` of a trace.
pub fn variation_penalty(trace: &ActivationTrace, s: &ClassIndicatorMatrix) -> Result<f64> {
    if trace.depth() < 2 {
        return Err(Error::invalid("variation penalty needs depth >= 2"));
    }
    let layers: Vec<usize> = (1..=trace.depth()).collect();
    Ok(variation(&layer_sigmas(trace, s, &layers, Norm::L2)?))
}

/// Differentiable penalty over recorded representations (L2 distances).
/// Returns the penalty var and the forward `Sigma` value of each rep.
pub fn variation_penalty_tape(
    tape: &mut Tape,
    reps: &[Var],
    s: &ClassIndicatorMatrix,
) -> Result<(Var, Vec<f64>)> {
    if reps.len() < 2 {
        return Err(Error::invalid("variation penalty needs at least 2 taps"));
    }
    let mask = tape.constant(s.cross_class_mask());
    let mut sigma_vars = Vec::with_capacity(reps.len());
    for &r in reps {
        if tape.value(r).rows() != s.rows() {
            return Err(Error::shape(
                "variation_penalty",
                format!(
                    "representation has {} rows, S has {}",
                    tape.value(r).rows(),
                    s.rows()
                ),
            ));
        }
        let a = tape.pairwise_distance(r)?;
        let masked = tape.mul(a, mask)?;
        sigma_vars.push(tape.sum(masked)?);
    }
    let sigmas = sigma_vars.iter().map(|&v| tape.value(v).item()).collect();
    let mut total: Option<Var> = None;
    for w in sigma_vars.windows(2) {
        let d = tape.sub(w[1], w[0])?;
        let d = tape.abs(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    Ok((total.expect("at least one window"), sigmas))
}

/// One `epoch,layer,sigma` row per entry.
pub fn write_sigma_csv<W: Write>(w: &mut W, rows: &[(usize, usize, f64)]) -> Result<()> {
    writeln!(w, "epoch,layer,sigma")?;
    for (epoch, layer, sigma) in rows {
        writeln!(w, "{epoch},{layer},{sigma:?}")?;
    }
    Ok(())
}
