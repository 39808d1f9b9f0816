use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layer::BnMode;
use super::network::{argmax_rows, Delta, Network};
use super::ortho::orthogonality_step;
use crate::autodiff::Tape;
use crate::datascope::LabeledDataset;
use crate::error::{Error, Result};
use crate::graphreg::{variation_penalty_tape, ClassIndicatorMatrix};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    #[default]
    None,
    /// Cross-entropy plus `weight * sum_l |Sigma^{l+1} - Sigma^l|` over the taps.
    Laplacian { weight: f64 },
    /// After every SGD step each weight matrix takes one
    /// [`orthogonality_step`] with `beta = weight`.
    Orthogonality { weight: f64 },
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "vanilla",
            Regularizer::Laplacian { .. } => "laplacian",
            Regularizer::Orthogonality { .. } => "orthogonality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub batchnorm_mode: BnMode,
    /// 1-based layers whose outputs enter the laplacian penalty; `None`
    /// taps every layer.
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            regularizer: Regularizer::None,
            batchnorm_mode: BnMode::Train,
            taps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        // zero is allowed: it is the no-op baseline
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        match self.regularizer {
            Regularizer::None => {}
            Regularizer::Laplacian { weight } => {
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(Error::config(
                        "regularizer.weight",
                        "must be finite and >= 0",
                    ));
                }
            }
            Regularizer::Orthogonality { weight } => {
                if !(0.0..=0.01).contains(&weight) {
                    return Err(Error::config(
                        "regularizer.weight",
                        "orthogonality weight must lie in [0, 0.01]",
                    ));
                }
            }
        }
        if let Some(taps) = &self.taps {
            if taps.len() < 2 {
                return Err(Error::config("taps", "need at least two taps"));
            }
            if taps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("taps", "must be strictly increasing"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-mean of the full objective.
    pub loss: f64,
    pub cross_entropy: f64,
    /// Batch-mean variation penalty (0 without the laplacian regularizer).
    pub variation: f64,
    /// Batch-mean `Sigma` per tap (empty without the laplacian regularizer).
    pub sigmas: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Training-set accuracy of the returned network (frozen batch-norm).
    pub train_accuracy: f64,
    pub delta: Delta,
}

impl TrainLog {
    /// `(epoch, layer, sigma)` rows for the sigma CSV.
    pub fn sigma_rows(&self) -> Vec<(usize, usize, f64)> {
        self.epochs
            .iter()
            .flat_map(|e| e.sigmas.iter().map(move |&(l, s)| (e.epoch, l, s)))
            .collect()
    }

    pub fn write_loss_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,loss,cross_entropy,variation")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:?},{:?},{:?}",
                e.epoch, e.loss, e.cross_entropy, e.variation
            )?;
        }
        Ok(())
    }
}

fn gather(data: &LabeledDataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let d = data.dim();
    let mut rows = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        rows.extend_from_slice(data.input(i));
        labels.push(data.labels()[i]);
    }
    (
        Tensor::matrix(idx.len(), d, rows).expect("consistent shape"),
        labels,
    )
}

/// Mini-batch SGD on cross-entropy (+ regularizer). Returns a trained copy
/// with `delta`, `seed` and `config_echo` filled in.
pub fn train(
    net: &Network,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset dim {} but network input {}",
                data.dim(),
                net.input_dim()
            ),
        ));
    }
    if data.classes() != net.output_dim() {
        return Err(Error::shape(
            "train",
            format!(
                "{} classes but network output width {}",
                data.classes(),
                net.output_dim()
            ),
        ));
    }
    let taps: Vec<usize> = match &config.taps {
        Some(t) => {
            for &l in t {
                net.check_layer_index(l)?;
            }
            t.clone()
        }
        None => (1..=net.depth()).collect(),
    };
    let laplacian = match config.regularizer {
        Regularizer::Laplacian { weight } => {
            if taps.len() < 2 {
                return Err(Error::config(
                    "taps",
                    "laplacian regularizer needs a network of depth >= 2",
                ));
            }
            Some(weight)
        }
        _ => None,
    };

    let mut net = net.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, &[0x5407, epoch as u64]);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut ce_sum, mut var_sum) = (0.0, 0.0, 0.0);
        let mut sigma_sum = vec![0.0; if laplacian.is_some() { taps.len() } else { 0 }];
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = gather(data, idx);
            let targets = crate::datascope::one_hot(&labels, data.classes());
            let mut tape = Tape::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            };
            let fwd = net
                .forward_tape(&mut tape, &x, config.batchnorm_mode)
                .map_err(diverged)?;
            let ce = tape
                .softmax_cross_entropy(fwd.logits, &targets)
                .map_err(diverged)?;
            let mut loss = ce;
            let mut variation = 0.0;
            if let Some(weight) = laplacian {
                if idx.len() >= 2 {
                    let s = ClassIndicatorMatrix::from_labels(&labels, data.classes())?;
                    let reps: Vec<_> = taps.iter().map(|&l| fwd.reps[l]).collect();
                    let (pen, sigmas) =
                        variation_penalty_tape(&mut tape, &reps, &s).map_err(diverged)?;
                    variation = tape.value(pen).item();
                    for (acc, s) in sigma_sum.iter_mut().zip(sigmas) {
                        *acc += s;
                    }
                    let scaled = tape.scale(pen, weight)?;
                    loss = tape.add(ce, scaled)?;
                }
            }
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            ce_sum += tape.value(ce).item();
            var_sum += variation;
            loss_sum += total;
            batches += 1;

            let grads = tape.backward(loss).map_err(diverged)?;
            for (p, &v) in net.params_mut().into_iter().zip(&fwd.params) {
                let g = grads.wrt(v, &tape);
                for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *pi -= config.learning_rate * gi;
                }
            }
            if config.batchnorm_mode == BnMode::Train {
                for (layer, s) in net.layers_mut().iter_mut().zip(&fwd.stats) {
                    layer.absorb_stats(s, idx.len());
                }
            }
            if let Regularizer::Orthogonality { weight } = config.regularizer {
                if weight > 0.0 {
                    for layer in net.layers_mut() {
                        for w in layer.weights_mut() {
                            *w = orthogonality_step(w, weight)?;
                        }
                    }
                }
            }
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
        }
        let n = batches as f64;
        epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            variation: var_sum / n,
            sigmas: taps
                .iter()
                .copied()
                .zip(sigma_sum.iter().map(|s| s / n))
                .collect(),
        });
    }

    let out = net.forward(data.inputs())?;
    let predicted = argmax_rows(&out);
    let correct = predicted
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    let delta = delta_of(&out, data)?;
    net.delta = Some(delta);
    net.seed = config.seed;
    net.config_echo = Some(serde_json::to_string(config)?);
    Ok((
        net,
        TrainLog {
            epochs,
            train_accuracy: correct as f64 / data.len() as f64,
            delta,
        },
    ))
}

fn delta_of(out: &Tensor, data: &LabeledDataset) -> Result<Delta> {
    if out.cols() != data.classes() {
        return Err(Error::shape(
            "delta",
            format!("output width {} but {} classes", out.cols(), data.classes()),
        ));
    }
    let (mut l2, mut linf) = (0.0f64, 0.0f64);
    for i in 0..data.len() {
        let c = data.labels()[i];
        let (mut sq, mut mx) = (0.0f64, 0.0f64);
        for (k, &v) in out.row(i).iter().enumerate() {
            let d = v - if k == c { 1.0 } else { 0.0 };
            sq += d * d;
            mx = mx.max(d.abs());
        }
        l2 = l2.max(sq.sqrt());
        linf = linf.max(mx);
    }
    Ok(Delta { l2, linf })
}

/// `max_i ||F(x_i) - c^{x_i}||` over `data`, under L2 and Linf.
pub fn measure_delta(net: &Network, data: &LabeledDataset) -> Result<Delta> {
    delta_of(&net.forward(data.inputs())?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datascope::{synth_blobs, BlobSpec};
    use crate::netfun::LayerSpec;

    fn blobs(seed: u64) -> LabeledDataset {
        synth_blobs(&BlobSpec {
            classes: 2,
            per_class: 20,
            dim: 2,
            separation: 10.0,
            noise_sd: 0.1,
            seed,
        })
        .unwrap()
    }

    fn mlp() -> Network {
        Network::new(
            2,
            &[
                LayerSpec::Affine {
                    input: 2,
                    output: 8,
                },
                LayerSpec::Relu,
                LayerSpec::Affine {
                    input: 8,
                    output: 2,
                },
                LayerSpec::Softmax,
            ],
            3,
        )
        .unwrap()
    }

    fn config(epochs: usize, reg: Regularizer) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 7,
            regularizer: reg,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs(1);
        let (net, log) = train(&mlp(), &data, &config(200, Regularizer::None)).unwrap();
        assert_eq!(log.train_accuracy, 1.0);
        let pred = net.predict(data.inputs()).unwrap();
        let acc = pred
            .iter()
            .zip(data.labels())
            .filter(|(p, l)| p == l)
            .count() as f64
            / data.len() as f64;
        assert_eq!(acc, log.train_accuracy);
        assert!(net.delta.unwrap().l2 < 0.2);
        assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = blobs(2);
        let mut cfg = config(3, Regularizer::None);
        cfg.learning_rate = 0.0;
        cfg.batchnorm_mode = BnMode::Frozen;
        let start = mlp();
        let (net, _) = train(&start, &data, &cfg).unwrap();
        assert_eq!(net.params(), start.params());
    }

    #[test]
    fn laplacian_terms_are_logged() {
        let data = blobs(3);
        let (_, log) = train(
            &mlp(),
            &data,
            &config(5, Regularizer::Laplacian { weight: 1e-2 }),
        )
        .unwrap();
        for e in &log.epochs {
            assert!(e.cross_entropy.is_finite() && e.variation.is_finite());
            assert!(e.variation > 0.0);
            assert_eq!(e.sigmas.len(), 4);
        }
        assert_eq!(log.sigma_rows().len(), 20);
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs(4);
        let specs = [
            LayerSpec::Affine {
                input: 2,
                output: 4,
            },
            LayerSpec::ResidualBlock { dim: 4 },
            LayerSpec::Affine {
                input: 4,
                output: 2,
            },
            LayerSpec::Softmax,
        ];
        let net = Network::new(2, &specs, 9).unwrap();
        let cfg = config(4, Regularizer::Laplacian { weight: 1e-3 });
        let (a, _) = train(&net, &data, &cfg).unwrap();
        let (b, _) = train(&net, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(train(&net, &data, &other).unwrap().0, a);
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let mut cfg = config(2, Regularizer::None);
        cfg.learning_rate = 1e300;
        let err = train(&mlp(), &blobs(5), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn orthogonality_pulls_weights_toward_unit_singular_values() {
        let data = blobs(6);
        let (net, _) = train(
            &mlp(),
            &data,
            &config(50, Regularizer::Orthogonality { weight: 0.01 }),
        )
        .unwrap();
        assert!(net.params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = config(1, Regularizer::Orthogonality { weight: 0.5 });
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("regularizer.weight"));
        cfg.regularizer = Regularizer::None;
        cfg.learning_rate = -1.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("learning_rate"));
    }
}
