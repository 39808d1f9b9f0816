use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datascope::LabeledDataset;
use crate::error::{Error, Result};
use crate::netfun::Network;
use crate::norm::Norm;
use crate::rng;
use crate::robustometry::{estimate_layer_alpha, RobustnessQuery, Sampling};
use crate::tensor::Tensor;

/// Space in which noise is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Raw inputs (`[0, 1]` for images); the SNR uses the raw signal power.
    #[default]
    Unit,
    /// Per-feature standardised inputs (statistics of the evaluation set);
    /// the noise is mapped back to raw units before evaluation.
    Standardized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptions {
    #[serde(default)]
    pub mode: NoiseMode,
    /// Clamp noisy image inputs to `[0, 1]` (unit mode only).
    #[serde(default = "yes")]
    pub clamp: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseOptions {
    fn default() -> Self {
        NoiseOptions {
            mode: NoiseMode::Unit,
            clamp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSweepResult {
    pub snr_db: Vec<f64>,
    pub run_seeds: Vec<u64>,
    /// `accuracy[run][k]` at `snr_db[k]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Arithmetic mean over runs, summed in run order.
    pub mean: Vec<f64>,
}

impl NoiseSweepResult {
    /// `snr_db,run_0,...,run_{n-1},mean_accuracy`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let runs: Vec<String> = (0..self.run_seeds.len())
            .map(|i| format!(",run_{i}"))
            .collect();
        writeln!(w, "snr_db{},mean_accuracy", runs.concat())?;
        for (k, s) in self.snr_db.iter().enumerate() {
            write!(w, "{s:?}")?;
            for run in &self.accuracy {
                write!(w, ",{:?}", run[k])?;
            }
            writeln!(w, ",{:?}", self.mean[k])?;
        }
        Ok(())
    }
}

pub(crate) fn mean_in_order(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Accuracy of `net` on noisy copies of `data`. Per example the noise sd is
/// `sqrt(mean(x^2) / 10^(snr/10))`, so `snr = +inf` reproduces clean inputs.
pub fn noise_sweep(
    net: &Network,
    data: &LabeledDataset,
    snr_db: &[f64],
    runs: usize,
    seed: u64,
    opts: NoiseOptions,
) -> Result<NoiseSweepResult> {
    if data.is_empty() {
        return Err(Error::invalid(
            "noise sweep needs a nonempty evaluation set",
        ));
    }
    if runs == 0 || snr_db.is_empty() {
        return Err(Error::invalid(
            "noise sweep needs at least one run and one SNR value",
        ));
    }
    if let Some(s) = snr_db.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("SNR {s} is not a number")));
    }
    let n = data.len();
    let d = data.dim();
    let (centre, spread) = match opts.mode {
        NoiseMode::Unit => (vec![0.0; d], vec![1.0; d]),
        NoiseMode::Standardized => feature_stats(data.inputs()),
    };
    let clamp = opts.clamp && data.image && opts.mode == NoiseMode::Unit;
    let power: Vec<f64> = (0..n)
        .map(|i| {
            mean_in_order(
                data.input(i)
                    .iter()
                    .enumerate()
                    .map(|(k, v)| ((v - centre[k]) / spread[k]).powi(2)),
            )
        })
        .collect();
    let run_seeds: Vec<u64> = (0..runs)
        .map(|r| rng::derive_seed(seed, &[0x0153, r as u64]))
        .collect();
    let cells: Vec<(usize, usize)> = (0..runs)
        .flat_map(|r| (0..snr_db.len()).map(move |k| (r, k)))
        .collect();
    let accs = cells
        .into_par_iter()
        .map(|(run, k)| -> Result<f64> {
            let mut r = rng::stream(run_seeds[run], &[k as u64]);
            let gain = 10f64.powf(snr_db[k] / 10.0);
            let mut noisy = Vec::with_capacity(n * d);
            for i in 0..n {
                let sd = (power[i] / gain).sqrt();
                for (j, &v) in data.input(i).iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let mut x = v + spread[j] * sd * z;
                    if clamp {
                        x = x.clamp(0.0, 1.0);
                    }
                    noisy.push(x);
                }
            }
            let pred = net.predict(&Tensor::matrix(n, d, noisy)?)?;
            let hits = pred
                .iter()
                .zip(data.labels())
                .filter(|(p, l)| p == l)
                .count();
            Ok(hits as f64 / n as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy: Vec<Vec<f64>> = accs.chunks(snr_db.len()).map(<[f64]>::to_vec).collect();
    let mean = (0..snr_db.len())
        .map(|k| mean_in_order(accuracy.iter().map(|run| run[k])))
        .collect();
    Ok(NoiseSweepResult {
        snr_db: snr_db.to_vec(),
        run_seeds,
        accuracy,
        mean,
    })
}

fn feature_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            var[k] += (x.get(i, k) - mean[k]).powi(2);
        }
    }
    // constant features keep unit scale
    let sd = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerAlpha {
    pub layer: usize,
    pub kind: &'static str,
    pub alpha_hat: f64,
}

pub const FIG5_RADIUS: f64 = 0.1;

/// `alpha_hat` of every layer around `F^{l-1}(x)` at radius `r`.
pub fn layer_histogram(
    net: &Network,
    x: &[f64],
    r: f64,
    samples: usize,
    seed: u64,
    norm: Norm,
) -> Result<Vec<LayerAlpha>> {
    let q = RobustnessQuery::new(
        Tensor::from_rows(&[x])?,
        r,
        Sampling::new(norm, samples, seed),
    );
    (1..=net.depth())
        .map(|l| {
            Ok(LayerAlpha {
                layer: l,
                kind: net.layers()[l - 1].spec().kind(),
                alpha_hat: estimate_layer_alpha(net, l, &q)?.alpha_hat,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datascope::{synth_blobs, BlobSpec};
    use crate::netfun::layer::Affine;
    use crate::netfun::Layer;

    fn blobs(n: usize, sep: f64) -> LabeledDataset {
        synth_blobs(&BlobSpec {
            classes: 2,
            per_class: n / 2,
            dim: 2,
            separation: sep,
            noise_sd: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    /// Decides by the sign of the first coordinate.
    fn sign_net() -> Network {
        Network::from_layers(
            2,
            vec![Layer::Affine(Affine {
                weight: Tensor::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap(),
                bias: Tensor::zeros(&[2]),
            })],
        )
        .unwrap()
    }

    #[test]
    fn infinite_snr_is_clean() {
        let data = blobs(40, 4.0);
        let res = noise_sweep(
            &sign_net(),
            &data,
            &[f64::INFINITY],
            3,
            1,
            NoiseOptions::default(),
        )
        .unwrap();
        assert_eq!(res.mean, vec![1.0]);
    }

    #[test]
    fn very_low_snr_is_chance() {
        let data = blobs(1000, 4.0);
        let res = noise_sweep(&sign_net(), &data, &[-60.0], 1, 2, NoiseOptions::default()).unwrap();
        assert!((res.mean[0] - 0.5).abs() < 0.05, "{}", res.mean[0]);
    }

    #[test]
    fn mean_is_recomputable_and_deterministic() {
        let data = blobs(100, 1.0);
        let grid = [-10.0, 0.0, 10.0, 20.0];
        let a = noise_sweep(&sign_net(), &data, &grid, 4, 5, NoiseOptions::default()).unwrap();
        assert_eq!(
            a,
            noise_sweep(&sign_net(), &data, &grid, 4, 5, NoiseOptions::default()).unwrap()
        );
        for k in 0..grid.len() {
            let s: f64 = a.accuracy.iter().map(|r| r[k]).sum();
            assert_eq!(a.mean[k], s / 4.0);
        }
        for w in a.mean.windows(2) {
            assert!(w[1] >= w[0] - 0.03);
        }
    }

    #[test]
    fn scaled_block_shows_in_histogram() {
        let scaled = |c: f64| {
            Layer::Affine(Affine {
                weight: Tensor::identity(3).scale(c),
                bias: Tensor::zeros(&[3]),
            })
        };
        let net = Network::from_layers(3, vec![scaled(1.0), scaled(2.0), scaled(1.0)]).unwrap();
        let h = layer_histogram(&net, &[0.1, 0.5, -0.2], FIG5_RADIUS, 200, 0, Norm::L2).unwrap();
        let bars: Vec<f64> = h.iter().map(|b| b.alpha_hat).collect();
        assert!((bars[0] - 1.0).abs() < 1e-9 && (bars[2] - 1.0).abs() < 1e-9);
        assert!((bars[1] / 2.0 - 1.0).abs() < 0.02);
    }
}
