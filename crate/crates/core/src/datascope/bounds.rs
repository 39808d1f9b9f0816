use std::io::Write;

use serde::Serialize;

use super::dataset::{subsample_indices, LabeledDataset};
use super::pairs::PairScan;
use crate::error::{Error, Result};
use crate::netfun::Network;
use crate::norm::Norm;

/// A pair-derived quantity and the pair (and layer) that attains it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairValue {
    pub value: f64,
    pub i: usize,
    pub j: usize,
    pub layer: Option<usize>,
}

/// Distance factor for a dataset under a norm: the per-sqrt-dim convention
/// only rescales L2.
fn factor(data: &LabeledDataset, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => data.distance_factor(),
        Norm::Linf => 1.0,
    }
}

fn require_two_classes(data: &LabeledDataset) -> Result<()> {
    if data.nonempty_classes() < 2 {
        return Err(Error::invalid(format!(
            "dataset `{}` needs at least two nonempty classes",
            data.name
        )));
    }
    Ok(())
}

/// `min ||x - x'||` over cross-class pairs.
pub fn margin(data: &LabeledDataset, norm: Norm) -> Result<PairValue> {
    require_two_classes(data)?;
    let scan = PairScan::new(data.inputs(), data.labels(), norm, factor(data, norm));
    let (value, i, j) = scan.min_pair().expect("two classes give a pair");
    Ok(PairValue {
        value,
        i,
        j,
        layer: None,
    })
}

/// Aggregate cross-class distance statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairStats {
    pub min: f64,
    pub mean: f64,
    pub arg_min: (usize, usize),
    pub pairs: usize,
    pub delta: f64,
    pub norm: Norm,
    pub scaling: &'static str,
    pub subsample: Option<Subsample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
}

pub fn pair_stats(
    data: &LabeledDataset,
    norm: Norm,
    delta: f64,
    subsample: Option<Subsample>,
) -> Result<PairStats> {
    let original = data.len();
    let sub;
    let data = match subsample {
        Some(s) if s.size < data.len() => {
            sub = data.subsample(s.size, s.seed)?;
            &sub
        }
        _ => data,
    };
    require_two_classes(data)?;
    let scan = PairScan::new(data.inputs(), data.labels(), norm, factor(data, norm));
    let (min, i, j) = scan.min_pair().expect("two classes give a pair");
    let (pairs, mean) = scan.count_and_mean();
    Ok(PairStats {
        // the screened mean can sit a rounding step below an exact minimum
        mean: mean.max(min),
        min,
        arg_min: (i, j),
        pairs,
        delta,
        norm,
        scaling: data.scaling.name(),
        subsample: subsample.filter(|s| s.size < original),
    })
}

/// `min` over layers and cross-class pairs of `||F^l(x) - F^l(x')||`.
/// `layers` are 1-based; an empty slice selects every layer.
pub fn gap(
    net: &Network,
    data: &LabeledDataset,
    layers: &[usize],
    norm: Norm,
) -> Result<PairValue> {
    require_two_classes(data)?;
    let all: Vec<usize> = (1..=net.depth()).collect();
    let layers = if layers.is_empty() { &all[..] } else { layers };
    for &l in layers {
        net.check_layer_index(l)?;
    }
    let trace = net.forward_trace(data.inputs())?;
    let mut best: Option<PairValue> = None;
    for &l in layers {
        let scan = PairScan::new(trace.at(l), data.labels(), norm, 1.0);
        let (value, i, j) = scan.min_pair().expect("two classes give a pair");
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(PairValue {
                value,
                i,
                j,
                layer: Some(l),
            });
        }
    }
    best.ok_or_else(|| Error::invalid("no layers selected"))
}

/// `max ||c^x - c^x'|| - delta` for one-hot labels.
pub fn margin_output(net: &Network, norm: Norm) -> Result<f64> {
    let delta = net
        .delta
        .ok_or_else(|| Error::invalid("network has no measured output tolerance (delta)"))?;
    let d = match norm {
        Norm::L2 => delta.l2,
        Norm::Linf => delta.linf,
    };
    Ok(norm.one_hot_distance() - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapVerdict {
    RadiusWithinGap,
    GapAboveOutputMargin,
    Both,
    /// Neither disjunct holds: some layer is not 1-robust at this radius.
    HypothesisViolated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub r: f64,
    pub gap: PairValue,
    pub margin_output: f64,
    pub radius_within_gap: bool,
    pub gap_above_output_margin: bool,
    pub verdict: GapVerdict,
}

/// Evaluates `r <= gap_F(R)  or  gap_F(R) >= margin_output`.
pub fn gap_condition_check(
    net: &Network,
    data: &LabeledDataset,
    r: f64,
    norm: Norm,
) -> Result<GapReport> {
    let gap = gap(net, data, &[], norm)?;
    let margin_output = margin_output(net, norm)?;
    let first = r <= gap.value;
    let second = gap.value >= margin_output;
    let verdict = match (first, second) {
        (true, true) => GapVerdict::Both,
        (true, false) => GapVerdict::RadiusWithinGap,
        (false, true) => GapVerdict::GapAboveOutputMargin,
        (false, false) => GapVerdict::HypothesisViolated,
    };
    Ok(GapReport {
        r,
        gap,
        margin_output,
        radius_within_gap: first,
        gap_above_output_margin: second,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzLowerBound {
    pub bound: f64,
    pub i: usize,
    pub j: usize,
    /// A zero-distance cross-class pair makes the bound infinite.
    pub inconsistent: bool,
    pub norm: Norm,
    pub scaling: &'static str,
    pub delta: f64,
}

/// `max over cross-class pairs of (||c^x - c^x'|| - delta) / ||x - x'||`.
///
/// One-hot numerators are all equal, so the maximum sits at the closest
/// pair when the numerator is positive and at the farthest pair otherwise.
pub fn dataset_lipschitz_lower_bound(
    data: &LabeledDataset,
    delta: f64,
    norm: Norm,
) -> Result<LipschitzLowerBound> {
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be >= 0, got {delta}")));
    }
    require_two_classes(data)?;
    let numerator = norm.one_hot_distance() - delta;
    let scan = PairScan::new(data.inputs(), data.labels(), norm, factor(data, norm));
    let (dist, i, j) = if numerator >= 0.0 {
        scan.min_pair()
    } else {
        scan.max_pair()
    }
    .expect("two classes give a pair");
    let (bound, inconsistent) = if dist == 0.0 {
        if numerator > 0.0 {
            (f64::INFINITY, true)
        } else {
            (0.0, true)
        }
    } else {
        (numerator / dist, false)
    };
    Ok(LipschitzLowerBound {
        bound,
        i,
        j,
        inconsistent,
        norm,
        scaling: data.scaling.name(),
        delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FractionRow {
    pub alpha: f64,
    pub d: f64,
    pub fraction: f64,
    pub n_pairs: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FractionReport {
    pub rows: Vec<FractionRow>,
    pub subsample: Option<Subsample>,
}

/// Share of cross-class pairs within distance `d` that no `alpha`-Lipschitz
/// classifier with output tolerance `delta` can separate:
/// `||c^x - c^x'|| - delta > alpha ||x - x'||`.
///
/// When the pair count exceeds `pair_budget`, the scan runs on a seeded
/// subsample whose size is reported. A `d` with no pairs gives fraction 0.
pub fn incompatible_pair_fraction(
    data: &LabeledDataset,
    alphas: &[f64],
    d: f64,
    delta: f64,
    norm: Norm,
    pair_budget: usize,
    seed: u64,
) -> Result<FractionReport> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!(
            "distance ceiling must be positive, got {d}"
        )));
    }
    let n = data.len();
    let total_pairs = n.saturating_mul(n.saturating_sub(1)) / 2;
    let (sub, subsample) = if total_pairs > pair_budget {
        let mut m = ((2.0 * pair_budget as f64).sqrt() as usize).max(2);
        while m * (m - 1) / 2 > pair_budget && m > 2 {
            m -= 1;
        }
        (
            Some(data.select(&subsample_indices(n, m, seed))?),
            Some(Subsample { size: m, seed }),
        )
    } else {
        (None, None)
    };
    let data = sub.as_ref().unwrap_or(data);
    let numerator = norm.one_hot_distance() - delta;
    let scan = PairScan::new(data.inputs(), data.labels(), norm, factor(data, norm));
    let (n_pairs, counts) = scan.count_violations(d, alphas, numerator);
    let rows = alphas
        .iter()
        .zip(counts)
        .map(|(&alpha, violations)| FractionRow {
            alpha,
            d,
            fraction: if n_pairs == 0 {
                0.0
            } else {
                violations as f64 / n_pairs as f64
            },
            n_pairs,
            violations,
        })
        .collect();
    Ok(FractionReport { rows, subsample })
}

pub fn write_fraction_csv<W: Write>(w: &mut W, report: &FractionReport) -> Result<()> {
    writeln!(w, "alpha,d,fraction,n_pairs,subsample_seed")?;
    let seed = report
        .subsample
        .map(|s| s.seed.to_string())
        .unwrap_or_else(|| "none".into());
    for r in &report.rows {
        writeln!(
            w,
            "{:?},{:?},{:?},{},{}",
            r.alpha, r.d, r.fraction, r.n_pairs, seed
        )?;
    }
    Ok(())
}

/// One row of the `quantity,value,arg_i,arg_j,layer` table.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantityRow {
    pub quantity: String,
    pub value: f64,
    pub arg_i: Option<usize>,
    pub arg_j: Option<usize>,
    pub layer: Option<usize>,
}

impl QuantityRow {
    pub fn scalar(quantity: impl Into<String>, value: f64) -> Self {
        QuantityRow {
            quantity: quantity.into(),
            value,
            arg_i: None,
            arg_j: None,
            layer: None,
        }
    }

    pub fn pair(quantity: impl Into<String>, p: &PairValue) -> Self {
        QuantityRow {
            quantity: quantity.into(),
            value: p.value,
            arg_i: Some(p.i),
            arg_j: Some(p.j),
            layer: p.layer,
        }
    }
}

pub fn write_quantity_csv<W: Write>(w: &mut W, rows: &[QuantityRow]) -> Result<()> {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "quantity,value,arg_i,arg_j,layer")?;
    for r in rows {
        writeln!(
            w,
            "{},{:?},{},{},{}",
            r.quantity,
            r.value,
            opt(r.arg_i),
            opt(r.arg_j),
            opt(r.layer)
        )?;
    }
    Ok(())
}
