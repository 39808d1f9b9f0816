//! Monte Carlo estimation of `alpha_lim(F, r)`.
//!
//! Every probe is `x + m u` with `u` on the unit sphere of the chosen norm
//! and `m` on a jittered geometric ladder `top * q^(k + j)`, `k = 0..levels`,
//! `j in (0, 1]` drawn per direction, `q = 10^(-4/grid)`. The ratio
//! `||F(x + m u) - F(x)|| / ||(x + m u) - x||` is filed under the smallest
//! requested radius that strictly exceeds the realised perturbation size;
//! prefix maxima over those buckets give `alpha_hat(r)`. A curve therefore
//! reuses every probe of its smaller radii and is non-decreasing exactly.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::functions::{LayerFunction, VectorFunction};
use crate::error::{Error, Result};
use crate::netfun::Network;
use crate::norm::Norm;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 4096;
pub const DEFAULT_GRID: usize = 16;
/// Perturbations smaller than this are not probed.
pub const MAGNITUDE_FLOOR: f64 = 1e-9;
/// Decades covered by `grid` ladder levels.
const DECADES_PER_GRID: f64 = 4.0;
/// Soft cap on the number of values in one evaluation batch.
const BATCH_VALUES: usize = 1 << 20;

/// How probes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default)]
    pub norm: Norm,
    /// Directions per point.
    pub samples: usize,
    /// Ladder points per four decades of magnitude.
    pub grid: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            norm: Norm::L2,
            samples: DEFAULT_SAMPLES,
            grid: DEFAULT_GRID,
            seed: 0,
        }
    }
}

impl Sampling {
    pub fn new(norm: Norm, samples: usize, seed: u64) -> Self {
        Sampling {
            norm,
            samples,
            seed,
            ..Sampling::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if self.grid == 0 {
            return Err(Error::invalid("magnitude grid needs at least 1 point"));
        }
        Ok(())
    }

    fn quotient(&self) -> f64 {
        10f64.powf(-DECADES_PER_GRID / self.grid as f64)
    }

    /// Ladder length reaching `grid` levels below `bottom` from `top`.
    fn levels(&self, top: f64, bottom: f64) -> usize {
        let extra = ((top / bottom).log10() * self.grid as f64 / DECADES_PER_GRID).ceil();
        self.grid + extra.max(0.0) as usize
    }
}

/// Points `R` (rows), radius and sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessQuery {
    pub points: Tensor,
    pub r: f64,
    pub sampling: Sampling,
}

impl RobustnessQuery {
    pub fn new(points: Tensor, r: f64, sampling: Sampling) -> Self {
        RobustnessQuery {
            points: points.as_matrix(),
            r,
            sampling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessEstimate {
    pub alpha_hat: f64,
    pub r: f64,
    /// Largest observed ratio around each point.
    pub per_point: Vec<f64>,
    pub worst_point: usize,
    pub norm: Norm,
    pub samples: usize,
    pub grid: usize,
    pub seed: u64,
    /// Probes whose ratio entered the estimate.
    pub probes: usize,
    /// Probes skipped because `F` returned a non-finite value.
    pub non_finite: usize,
    /// Probes dropped for falling under [`MAGNITUDE_FLOOR`].
    pub below_floor: usize,
    pub magnitude_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaCurve {
    pub radii: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    /// `per_point[i][k]`: estimate around point `i` at `radii[k]`.
    pub per_point: Vec<Vec<f64>>,
    pub norm: Norm,
    pub samples: usize,
    pub grid: usize,
    pub seed: u64,
    pub probes: usize,
    pub non_finite: usize,
    pub below_floor: usize,
}

impl AlphaCurve {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "r,alpha_hat")?;
        for (r, a) in self.radii.iter().zip(&self.alpha_hat) {
            writeln!(w, "{r:?},{a:?}")?;
        }
        Ok(())
    }
}

impl RobustnessEstimate {
    /// One row per point: `point_index,r,alpha_hat,samples,seed`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "point_index,r,alpha_hat,samples,seed")?;
        for (i, a) in self.per_point.iter().enumerate() {
            writeln!(w, "{i},{:?},{a:?},{},{}", self.r, self.samples, self.seed)?;
        }
        Ok(())
    }
}

fn direction(norm: Norm, d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    match norm {
        Norm::L2 => loop {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let n = crate::tensor::l2(&g);
            if n > 0.0 {
                return g.into_iter().map(|v| v / n).collect();
            }
        },
        Norm::Linf => {
            let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
            if r.random_bool(0.5) {
                (0..d).map(|_| sign(r)).collect()
            } else {
                let face = r.random_range(0..d);
                let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..=1.0)).collect();
                v[face] = sign(r);
                v
            }
        }
    }
}

struct Buckets {
    per_point: Vec<Vec<f64>>,
    probes: usize,
    non_finite: usize,
    below_floor: usize,
}

/// Bucketed maxima for sorted, strictly increasing `edges`.
fn probe_buckets<F: VectorFunction + ?Sized>(
    f: &F,
    points: &Tensor,
    edges: &[f64],
    s: &Sampling,
) -> Result<Buckets> {
    s.validate()?;
    if edges.is_empty() || edges.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("radii must be positive and finite"));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("radii must be strictly increasing"));
    }
    let points = points.as_matrix();
    let d = f.input_dim();
    if points.cols() != d {
        return Err(Error::shape(
            "robustness query",
            format!("points have width {}, function expects {d}", points.cols()),
        ));
    }
    let n = points.rows();
    let base = f.eval_batch(&points)?;
    let top = *edges.last().expect("nonempty");
    let levels = s.levels(top, edges[0]);
    let q = s.quotient();
    let chunk = (BATCH_VALUES / (levels * d.max(base.cols()))).clamp(1, 256);

    let units: Vec<(usize, usize)> = (0..n)
        .flat_map(|p| (0..s.samples).step_by(chunk).map(move |start| (p, start)))
        .collect();
    let partials = units
        .into_par_iter()
        .map(|(p, start)| -> Result<(usize, Vec<f64>, [usize; 3])> {
            let x = points.row(p);
            let fx = base.row(p);
            let fx_finite = fx.iter().all(|v| v.is_finite());
            let end = (start + chunk).min(s.samples);
            let rows = (end - start) * levels;
            let mut data = Vec::with_capacity(rows * d);
            for dir in start..end {
                let mut r = rng::stream(s.seed, &[0xA1FA, p as u64, dir as u64]);
                let u = direction(s.norm, d, &mut r);
                let jitter = 1.0 - r.random::<f64>();
                for k in 0..levels {
                    let m = top * q.powf(k as f64 + jitter);
                    data.extend(x.iter().zip(&u).map(|(xi, ui)| xi + m * ui));
                }
            }
            let batch = Tensor::matrix(rows, d, data)?;
            let out = f.eval_batch(&batch)?;
            if out.rows() != rows {
                return Err(Error::shape(
                    "robustness probe",
                    "function changed the batch size",
                ));
            }
            let mut buckets = vec![0.0f64; edges.len()];
            let mut counts = [0usize; 3];
            for i in 0..rows {
                let eps = s.norm.dist(batch.row(i), x);
                if !(eps >= MAGNITUDE_FLOOR) {
                    counts[2] += 1;
                    continue;
                }
                let y = out.row(i);
                if !fx_finite || !y.iter().all(|v| v.is_finite()) {
                    counts[1] += 1;
                    continue;
                }
                let k = edges.partition_point(|&e| e <= eps);
                if k == edges.len() {
                    continue;
                }
                let ratio = s.norm.dist(y, fx) / eps;
                counts[0] += 1;
                if ratio > buckets[k] {
                    buckets[k] = ratio;
                }
            }
            Ok((p, buckets, counts))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_point = vec![vec![0.0f64; edges.len()]; n];
    let (mut probes, mut non_finite, mut below_floor) = (0, 0, 0);
    for (p, b, c) in partials {
        for (acc, v) in per_point[p].iter_mut().zip(b) {
            *acc = acc.max(v);
        }
        probes += c[0];
        non_finite += c[1];
        below_floor += c[2];
    }
    if probes == 0 {
        return Err(Error::Estimation(format!(
            "every probe failed ({non_finite} non-finite, {below_floor} below the magnitude floor)"
        )));
    }
    for row in &mut per_point {
        for k in 1..row.len() {
            row[k] = row[k].max(row[k - 1]);
        }
    }
    Ok(Buckets {
        per_point,
        probes,
        non_finite,
        below_floor,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `alpha_hat = max` over points, directions and magnitudes `< r` of the
/// probe ratio. Always a lower bound on `alpha_lim(F, r)` over the points.
pub fn estimate_alpha_lim<F: VectorFunction + ?Sized>(
    f: &F,
    q: &RobustnessQuery,
) -> Result<RobustnessEstimate> {
    if !(q.r > 0.0 && q.r.is_finite()) {
        return Err(Error::invalid(format!(
            "radius must be positive, got {}",
            q.r
        )));
    }
    let b = probe_buckets(f, &q.points, &[q.r], &q.sampling)?;
    let per_point: Vec<f64> = b.per_point.iter().map(|v| v[0]).collect();
    let worst_point = argmax(&per_point);
    Ok(RobustnessEstimate {
        alpha_hat: per_point[worst_point],
        r: q.r,
        worst_point,
        per_point,
        norm: q.sampling.norm,
        samples: q.sampling.samples,
        grid: q.sampling.grid,
        seed: q.sampling.seed,
        probes: b.probes,
        non_finite: b.non_finite,
        below_floor: b.below_floor,
        magnitude_floor: MAGNITUDE_FLOOR,
    })
}

/// The estimator applied to `f^l` alone around `F^{l-1}(x)` for each query point.
pub fn estimate_layer_alpha(
    net: &Network,
    layer: usize,
    q: &RobustnessQuery,
) -> Result<RobustnessEstimate> {
    let f = LayerFunction::new(net, layer)?;
    let mapped = net.forward_prefix(layer - 1, &q.points)?;
    estimate_alpha_lim(
        &f,
        &RobustnessQuery {
            points: mapped,
            r: q.r,
            sampling: q.sampling.clone(),
        },
    )
}

/// `r -> alpha_hat(r)` over strictly increasing radii with nested probes.
pub fn alpha_r_curve<F: VectorFunction + ?Sized>(
    f: &F,
    points: &Tensor,
    radii: &[f64],
    s: &Sampling,
) -> Result<AlphaCurve> {
    let b = probe_buckets(f, points, radii, s)?;
    let alpha_hat = (0..radii.len())
        .map(|k| b.per_point.iter().map(|v| v[k]).fold(0.0, f64::max))
        .collect();
    Ok(AlphaCurve {
        radii: radii.to_vec(),
        alpha_hat,
        per_point: b.per_point,
        norm: s.norm,
        samples: s.samples,
        grid: s.grid,
        seed: s.seed,
        probes: b.probes,
        non_finite: b.non_finite,
        below_floor: b.below_floor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RLimit {
    /// Largest grid radius with `alpha_hat <= target`; 0 when even the
    /// smallest grid radius exceeds it.
    pub r: f64,
    pub below_lower_bound: bool,
    pub alpha_at_r: f64,
    pub grid_step: f64,
    pub target: f64,
}

/// Searches the grid `lower + j * 1e-3 * upper` (`j >= 0`, positive radii
/// only) for the largest radius whose estimate stays within `target`.
pub fn r_lim<F: VectorFunction + ?Sized>(
    f: &F,
    target: f64,
    points: &Tensor,
    lower: f64,
    upper: f64,
    s: &Sampling,
) -> Result<RLimit> {
    if !(target > 0.0) {
        return Err(Error::invalid(format!(
            "alpha target must be positive, got {target}"
        )));
    }
    if !(lower >= 0.0 && upper > lower && upper.is_finite()) {
        return Err(Error::invalid(format!(
            "bad search bounds [{lower}, {upper}]"
        )));
    }
    let step = 1e-3 * upper;
    let steps = ((upper - lower) / step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|j| lower + j as f64 * step)
        .filter(|&r| r > 0.0)
        .collect();
    let curve = alpha_r_curve(f, points, &grid, s)?;
    // the curve is non-decreasing, so the admissible radii form a prefix
    let admissible = curve.alpha_hat.partition_point(|&a| a <= target);
    Ok(if admissible == 0 {
        RLimit {
            r: 0.0,
            below_lower_bound: true,
            alpha_at_r: curve.alpha_hat[0],
            grid_step: step,
            target,
        }
    } else {
        RLimit {
            r: grid[admissible - 1],
            below_lower_bound: false,
            alpha_at_r: curve.alpha_hat[admissible - 1],
            grid_step: step,
            target,
        }
    })
}
