use rand::Rng;

use robustlip::datascope::{synth_blobs, BlobSpec, LabeledDataset};
use robustlip::harness::{layer_histogram, FIG5_RADIUS};
use robustlip::netfun::layer::{Affine, BatchNorm};
use robustlip::netfun::{train, Layer, LayerSpec, Network, TrainConfig};
use robustlip::robustometry::{
    alpha_r_curve, default_lambda_grid, estimate_alpha_lim, estimate_layer_alpha,
    interpolation_sweep, mediator_classifier, nearest_neighbor_classifier, r_lim, sigmoid,
    RobustnessQuery, Sampling, Sigmoid,
};
use robustlip::{rng, Norm, Tensor};

fn sigmoid_points() -> Tensor {
    Tensor::from_rows(&[[-10.0], [10.0]]).unwrap()
}

#[test]
fn frozen_batchnorm_under_linf_is_its_largest_coefficient() {
    let mut r = rng::stream(1, &[]);
    let dim = 4;
    let mut bn = BatchNorm::new(dim);
    bn.gamma = Tensor::vector((0..dim).map(|_| r.random_range(-2.0..2.0)).collect());
    bn.beta = Tensor::vector((0..dim).map(|_| r.random_range(-1.0..1.0)).collect());
    bn.running_mean = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
    bn.running_var = (0..dim).map(|_| r.random_range(0.2..3.0)).collect();
    let oracle = (0..dim)
        .map(|k| (bn.gamma.data()[k] / (bn.running_var[k] + bn.eps).sqrt()).abs())
        .fold(0.0, f64::max);
    let net = Network::from_layers(dim, vec![Layer::BatchNorm(bn)]).unwrap();
    let points = Tensor::matrix(
        2,
        dim,
        (0..2 * dim).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    for radius in [0.01, 0.5, 3.0] {
        let q = RobustnessQuery::new(points.clone(), radius, Sampling::new(Norm::Linf, 2000, 3));
        let est = estimate_layer_alpha(&net, 1, &q).unwrap();
        assert!(
            (est.alpha_hat - oracle).abs() < 1e-6,
            "r={radius}: {} vs {oracle}",
            est.alpha_hat
        );
    }
}

#[test]
fn relu_layer_never_expands() {
    let net = Network::from_layers(
        3,
        vec![
            Layer::Affine(Affine {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(&[3]),
            }),
            Layer::Relu,
        ],
    )
    .unwrap();
    let points = Tensor::from_rows(&[[0.5, -0.5, 0.01], [2.0, 1.0, 3.0]]).unwrap();
    for norm in [Norm::L2, Norm::Linf] {
        let q = RobustnessQuery::new(points.clone(), 0.2, Sampling::new(norm, 500, 4));
        let est = estimate_layer_alpha(&net, 2, &q).unwrap();
        assert!(
            est.alpha_hat <= 1.0 + 1e-12 && est.alpha_hat > 0.99,
            "{norm}: {}",
            est.alpha_hat
        );
    }
}

#[test]
fn curve_is_monotone_and_nested() {
    let radii = [0.01, 0.1, 1.0, 5.0, 10.0, 15.0, 20.0];
    let s = Sampling::new(Norm::L2, 256, 5);
    let curve = alpha_r_curve(&Sigmoid { dim: 1 }, &sigmoid_points(), &radii, &s).unwrap();
    assert!(curve.alpha_hat.windows(2).all(|w| w[1] >= w[0]));
    // every single-radius estimate is at most the curve value there
    for (k, &r) in radii.iter().enumerate() {
        let single = estimate_alpha_lim(
            &Sigmoid { dim: 1 },
            &RobustnessQuery::new(sigmoid_points(), r, s.clone()),
        )
        .unwrap()
        .alpha_hat;
        assert!(single > 0.0 && single <= 0.25);
        assert!((single / curve.alpha_hat[k] - 1.0).abs() < 0.05);
    }
    let mut csv = Vec::new();
    curve.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("r,alpha_hat\n"));
}

#[test]
fn sigmoid_r_lim_matches_grid_oracle() {
    let (lower, upper, target) = (0.0, 20.0, 0.01);
    let step = 1e-3 * upper;
    // largest grid radius whose dense-grid constant stays within the target
    let constant = |r: f64| {
        let n = 20_000;
        let mut best: f64 = 0.0;
        for x in [-10.0, 10.0] {
            for k in 0..n {
                let eps = r * (2.0 * (k as f64 + 0.5) / n as f64 - 1.0);
                best = best.max((sigmoid(x + eps) - sigmoid(x)).abs() / eps.abs());
            }
        }
        best
    };
    let mut oracle = 0.0;
    let mut j = 1;
    while (j as f64) * step <= upper {
        let r = j as f64 * step;
        if constant(r) > target {
            break;
        }
        oracle = r;
        j += 1;
    }
    let est = r_lim(
        &Sigmoid { dim: 1 },
        target,
        &sigmoid_points(),
        lower,
        upper,
        &Sampling::new(Norm::L2, 2048, 6),
    )
    .unwrap();
    assert!(!est.below_lower_bound);
    assert!(
        (est.r - oracle).abs() <= 2.0 * step,
        "{} vs {oracle}",
        est.r
    );
}

#[test]
fn mediator_is_robust_inside_half_distance_only() {
    let x = [0.0, 1.0];
    let xp = [1.0, -0.5];
    let d = Norm::L2.dist(&x, &xp);
    let f = mediator_classifier(&x, &xp).unwrap();
    let pts = Tensor::from_rows(&[x, xp]).unwrap();
    let s = Sampling::new(Norm::L2, 10_000, 7);
    let inside =
        estimate_alpha_lim(&f, &RobustnessQuery::new(pts.clone(), 0.49 * d, s.clone())).unwrap();
    assert_eq!(inside.alpha_hat, 0.0);
    let beyond = estimate_alpha_lim(&f, &RobustnessQuery::new(pts, 0.6 * d, s)).unwrap();
    assert!(beyond.alpha_hat > 0.0);
    assert_eq!(f.decide(&[0.5, 0.25]), 0, "points on the bisector go to x");
}

#[test]
fn two_point_nearest_neighbour() {
    let data = LabeledDataset::new(
        "pair",
        Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap(),
        vec![0, 1],
        2,
    )
    .unwrap();
    let f = nearest_neighbor_classifier(&data, Norm::L2).unwrap();
    let s = Sampling::new(Norm::L2, 10_000, 8);
    let q = |r| RobustnessQuery::new(data.inputs().clone(), r, s.clone());
    assert_eq!(estimate_alpha_lim(&f, &q(0.99)).unwrap().alpha_hat, 0.0);
    assert!(estimate_alpha_lim(&f, &q(1.5)).unwrap().alpha_hat > 0.0);
}

fn trained_blobs_net(seed: u64) -> (Network, LabeledDataset) {
    let data = synth_blobs(&BlobSpec {
        classes: 2,
        per_class: 25,
        dim: 2,
        separation: 4.0,
        noise_sd: 0.3,
        seed,
    })
    .unwrap();
    let specs = [
        LayerSpec::Affine {
            input: 2,
            output: 6,
        },
        LayerSpec::Relu,
        LayerSpec::ResidualBlock { dim: 6 },
        LayerSpec::Affine {
            input: 6,
            output: 2,
        },
        LayerSpec::Softmax,
    ];
    let init = Network::new(2, &specs, seed).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        seed,
        ..TrainConfig::default()
    };
    (train(&init, &data, &cfg).unwrap().0, data)
}

#[test]
fn interpolation_between_classes_crosses_zero() {
    let (net, data) = trained_blobs_net(2);
    let j = (1..data.len())
        .find(|&j| data.labels()[j] != data.labels()[0])
        .unwrap();
    let sweep = interpolation_sweep(
        &net,
        data.input(0),
        data.input(j),
        &default_lambda_grid(),
        None,
    )
    .unwrap();
    let at = |l: f64| {
        sweep
            .rows
            .iter()
            .find(|r| r.lambda == l)
            .unwrap()
            .projection
    };
    assert!(at(1.0) > 0.0 && at(0.0) < 0.0);
    assert!(sweep
        .rows
        .windows(2)
        .any(|w| w[0].projection < 0.0 && w[1].projection >= 0.0));
    assert_eq!(sweep.rows.len(), 121);
}

#[test]
fn layer_histogram_of_a_deep_net_is_finite_and_positive() {
    let mut specs = vec![
        LayerSpec::Affine {
            input: 3,
            output: 6,
        },
        LayerSpec::Relu,
    ];
    specs.extend((0..8).map(|_| LayerSpec::ResidualBlock { dim: 6 }));
    specs.push(LayerSpec::Affine {
        input: 6,
        output: 2,
    });
    let net = Network::new(3, &specs, 9).unwrap();
    let bars = layer_histogram(&net, &[0.4, 0.2, 0.9], FIG5_RADIUS, 256, 9, Norm::L2).unwrap();
    assert_eq!(bars.len(), net.depth());
    assert!(bars
        .iter()
        .all(|b| b.alpha_hat.is_finite() && b.alpha_hat >= 0.0));
    assert!(bars
        .iter()
        .filter(|b| b.kind == "residual-block")
        .all(|b| b.alpha_hat > 0.0));
}

#[test]
fn seeds_change_probes_but_not_validity() {
    let q = |seed| RobustnessQuery::new(sigmoid_points(), 1.0, Sampling::new(Norm::L2, 64, seed));
    let a = estimate_alpha_lim(&Sigmoid { dim: 1 }, &q(1)).unwrap();
    assert_eq!(a, estimate_alpha_lim(&Sigmoid { dim: 1 }, &q(1)).unwrap());
    let b = estimate_alpha_lim(&Sigmoid { dim: 1 }, &q(2)).unwrap();
    assert_ne!(a.alpha_hat, b.alpha_hat);
    assert!(estimate_alpha_lim(
        &Sigmoid { dim: 1 },
        &RobustnessQuery::new(sigmoid_points(), 0.0, Sampling::default())
    )
    .is_err());
}
