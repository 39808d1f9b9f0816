use std::io::Write;

use serde::Serialize;

use super::estimator::{estimate_alpha_lim, estimate_layer_alpha, RobustnessQuery, Sampling};
use super::functions::VectorFunction;
use crate::error::{Error, Result};
use crate::netfun::Network;
use crate::tensor::Tensor;

/// Relative slack when comparing a measured layer constant with its target,
/// so that an exact isometry measured as `1 + ulp` still counts as 1-robust.
pub const HYPOTHESIS_RTOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub target: f64,
    /// `r * prod_{lambda < layer} target_lambda`.
    pub radius: f64,
    pub alpha_hat: f64,
    pub within_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompositionReport {
    pub r: f64,
    pub layers: Vec<LayerCheck>,
    /// `prod alpha_hat^l`.
    pub product: f64,
    pub end_to_end: f64,
    pub tolerance: f64,
    /// Every layer met its target.
    pub hypothesis_holds: bool,
    /// `end_to_end <= product * (1 + tolerance)`.
    pub bound_satisfied: bool,
}

impl CompositionReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "layer,target,radius,alpha_hat,within_target")?;
        for l in &self.layers {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{}",
                l.layer, l.target, l.radius, l.alpha_hat, l.within_target
            )?;
        }
        writeln!(w, "product,,{:?},{:?},", self.r, self.product)?;
        writeln!(
            w,
            "end_to_end,,{:?},{:?},{}",
            self.r, self.end_to_end, self.bound_satisfied
        )?;
        Ok(())
    }
}

/// Measures every layer at its shrunken radius and the whole network at
/// `r`, then compares the end-to-end estimate with the per-layer product.
/// A layer above its target is reported through `hypothesis_holds`, not as
/// an error.
pub fn check_compositional_bound(
    net: &Network,
    points: &Tensor,
    r: f64,
    targets: &[f64],
    sampling: &Sampling,
    tolerance: f64,
) -> Result<CompositionReport> {
    if targets.len() != net.depth() {
        return Err(Error::invalid(format!(
            "{} alpha targets for a network of depth {}",
            targets.len(),
            net.depth()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::invalid(format!(
            "alpha targets must lie in (0, 1], got {t}"
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    let mut layers = Vec::with_capacity(net.depth());
    let mut radius = r;
    for (i, &target) in targets.iter().enumerate() {
        let l = i + 1;
        let est = estimate_layer_alpha(
            net,
            l,
            &RobustnessQuery::new(points.clone(), radius, sampling.clone()),
        )?;
        layers.push(LayerCheck {
            layer: l,
            target,
            radius,
            alpha_hat: est.alpha_hat,
            within_target: est.alpha_hat <= target * (1.0 + HYPOTHESIS_RTOL),
        });
        radius *= target;
    }
    let product = layers.iter().map(|l| l.alpha_hat).product::<f64>();
    let end_to_end = estimate_alpha_lim(
        net,
        &RobustnessQuery::new(points.clone(), r, sampling.clone()),
    )?
    .alpha_hat;
    Ok(CompositionReport {
        r,
        hypothesis_holds: layers.iter().all(|l| l.within_target),
        bound_satisfied: end_to_end <= product * (1.0 + tolerance),
        layers,
        product,
        end_to_end,
        tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationRow {
    pub lambda: f64,
    pub output: Vec<f64>,
    /// `output[a] - output[b]` for the chosen class pair.
    pub projection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationSweep {
    pub classes: (usize, usize),
    pub rows: Vec<InterpolationRow>,
}

impl InterpolationSweep {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let k = self.rows.first().map_or(0, |r| r.output.len());
        let outs: Vec<String> = (0..k).map(|i| format!(",out_{i}")).collect();
        writeln!(w, "lambda,projection{}", outs.concat())?;
        for row in &self.rows {
            write!(w, "{:?},{:?}", row.lambda, row.projection)?;
            for v in &row.output {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `-0.1, -0.09, ..., 1.1`; both endpoints 0 and 1 are hit exactly.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=120).map(|k| (k as f64 - 10.0) / 100.0).collect()
}

/// `lambda -> F(lambda x + (1 - lambda) x')`. The projection defaults to the
/// score of `F(x)`'s class minus that of `F(x')`'s class.
pub fn interpolation_sweep<F: VectorFunction + ?Sized>(
    f: &F,
    x: &[f64],
    x_prime: &[f64],
    lambdas: &[f64],
    classes: Option<(usize, usize)>,
) -> Result<InterpolationSweep> {
    if x.len() != x_prime.len() {
        return Err(Error::shape(
            "interpolation_sweep",
            format!("endpoints have lengths {} and {}", x.len(), x_prime.len()),
        ));
    }
    if lambdas.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    let d = x.len();
    let mut data = Vec::with_capacity(lambdas.len() * d);
    for &l in lambdas {
        data.extend(x.iter().zip(x_prime).map(|(a, b)| l * a + (1.0 - l) * b));
    }
    let out = f.eval_batch(&Tensor::matrix(lambdas.len(), d, data)?)?;
    let classes = match classes {
        Some(c) => c,
        None => {
            let ends = f.eval_batch(&Tensor::from_rows(&[x, x_prime])?)?;
            let am = crate::netfun::argmax_rows(&ends);
            (am[0], am[1])
        }
    };
    if classes.0 >= out.cols() || classes.1 >= out.cols() {
        return Err(Error::invalid(format!(
            "class pair {classes:?} outside output width {}",
            out.cols()
        )));
    }
    let rows = lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let o = out.row(i);
            InterpolationRow {
                lambda,
                projection: o[classes.0] - o[classes.1],
                output: o.to_vec(),
            }
        })
        .collect();
    Ok(InterpolationSweep { classes, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netfun::layer::Affine;
    use crate::netfun::Layer;
    use crate::norm::Norm;
    use crate::robustometry::functions::Identity;

    fn linear(m: Tensor) -> Layer {
        let n = m.rows();
        Layer::Affine(Affine {
            weight: m,
            bias: Tensor::zeros(&[n]),
        })
    }

    fn points() -> Tensor {
        Tensor::from_rows(&[[0.2, -0.3], [1.0, 0.5]]).unwrap()
    }

    #[test]
    fn scalings_compose() {
        let half = Tensor::identity(2).scale(0.5);
        let net = Network::from_layers(2, vec![linear(half.clone()), linear(half)]).unwrap();
        let rep = check_compositional_bound(
            &net,
            &points(),
            0.4,
            &[0.5, 0.5],
            &Sampling::new(Norm::L2, 500, 1),
            1e-9,
        )
        .unwrap();
        assert!((rep.product - 0.25).abs() < 1e-9);
        assert!((rep.end_to_end - 0.25).abs() < 1e-9);
        assert!(rep.hypothesis_holds && rep.bound_satisfied);
        assert!((rep.layers[1].radius - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rotation_then_shrink() {
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Tensor::from_rows(&[[c, -s], [s, c]]).unwrap();
        let net =
            Network::from_layers(2, vec![linear(rot), linear(Tensor::identity(2).scale(0.8))])
                .unwrap();
        let rep = check_compositional_bound(
            &net,
            &points(),
            0.3,
            &[1.0, 0.8],
            &Sampling::new(Norm::L2, 500, 2),
            1e-6,
        )
        .unwrap();
        assert!((rep.product - 0.8).abs() < 1e-9, "{}", rep.product);
        assert!((rep.end_to_end - 0.8).abs() < 1e-9);
        assert!(rep.hypothesis_holds);
    }

    #[test]
    fn violated_hypothesis_is_reported() {
        let net = Network::from_layers(2, vec![linear(Tensor::identity(2).scale(1.5))]).unwrap();
        let rep = check_compositional_bound(
            &net,
            &points(),
            0.3,
            &[1.0],
            &Sampling::new(Norm::L2, 50, 2),
            0.0,
        )
        .unwrap();
        assert!(!rep.hypothesis_holds);
        assert!(check_compositional_bound(
            &net,
            &points(),
            0.3,
            &[1.2],
            &Sampling::new(Norm::L2, 50, 2),
            0.0
        )
        .is_err());
    }

    #[test]
    fn interpolation_endpoints_and_identity() {
        let sweep = interpolation_sweep(
            &Identity { dim: 1 },
            &[1.0],
            &[0.0],
            &default_lambda_grid(),
            Some((0, 0)),
        )
        .unwrap();
        for row in &sweep.rows {
            assert_eq!(row.output, vec![row.lambda]);
        }
        assert_eq!(sweep.rows[10].lambda, 0.0);
        assert_eq!(sweep.rows[110].lambda, 1.0);
    }
}
