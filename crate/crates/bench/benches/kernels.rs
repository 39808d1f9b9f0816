use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use robustlip::datascope::{incompatible_pair_fraction, margin, synth_blobs};
use robustlip::netfun::{train, LayerSpec};
use robustlip::robustometry::{estimate_alpha_lim, RobustnessQuery, Sampling};
use robustlip::{BlobSpec, LabeledDataset, Network, Norm, TrainConfig};

fn blobs(per_class: usize, dim: usize) -> LabeledDataset {
    synth_blobs(&BlobSpec {
        classes: 2,
        per_class,
        dim,
        separation: 2.0,
        noise_sd: 0.5,
        seed: 1,
    })
    .unwrap()
}

fn small_net(dim: usize) -> Network {
    let specs = [
        LayerSpec::Affine {
            input: dim,
            output: 32,
        },
        LayerSpec::Relu,
        LayerSpec::ResidualBlock { dim: 32 },
        LayerSpec::Affine {
            input: 32,
            output: 2,
        },
        LayerSpec::Softmax,
    ];
    Network::new(dim, &specs, 1).unwrap()
}

fn estimator(c: &mut Criterion) {
    let net = small_net(16);
    let points = blobs(4, 16).inputs().clone();
    let mut group = c.benchmark_group("estimate_alpha_lim");
    for samples in [256, 4096] {
        let q = RobustnessQuery::new(points.clone(), 0.1, Sampling::new(Norm::L2, samples, 3));
        group.bench_with_input(BenchmarkId::from_parameter(samples), &q, |b, q| {
            b.iter(|| estimate_alpha_lim(&net, black_box(q)).unwrap())
        });
    }
    group.finish();
}

fn pair_scans(c: &mut Criterion) {
    let mut group = c.benchmark_group("pair_scans");
    for n in [500, 2000] {
        let data = blobs(n / 2, 32);
        group.bench_with_input(BenchmarkId::new("margin", n), &data, |b, d| {
            b.iter(|| margin(black_box(d), Norm::L2).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fraction", n), &data, |b, d| {
            b.iter(|| {
                incompatible_pair_fraction(
                    black_box(d),
                    &[0.5, 1.0, 2.0],
                    4.0,
                    0.1,
                    Norm::L2,
                    usize::MAX,
                    0,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let data = blobs(128, 16);
    let init = small_net(16);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    c.bench_function("train_one_epoch", |b| {
        b.iter(|| train(&init, black_box(&data), &cfg).unwrap())
    });
}

criterion_group!(benches, estimator, pair_scans, training_epoch);
criterion_main!(benches);
