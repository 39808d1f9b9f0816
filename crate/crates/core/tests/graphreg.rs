use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use robustlip::graphreg::{
    distance_graph, layer_sigmas, pairwise_distance_matrix, smoothness, variation,
    variation_penalty, ClassIndicatorMatrix,
};
use robustlip::netfun::{LayerSpec, Network};
use robustlip::{rng, Norm, Tensor};

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[0x6A]);
    Tensor::matrix(
        n,
        d,
        (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect(),
    )
    .unwrap()
}

fn brute_sigma(reps: &Tensor, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..reps.rows() {
        for j in (i + 1)..reps.rows() {
            if labels[i] != labels[j] {
                let sq: f64 = reps
                    .row(i)
                    .iter()
                    .zip(reps.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                s += sq.sqrt();
            }
        }
    }
    2.0 * s
}

#[test]
fn adjacency_matches_scalar_loop() {
    let x = gaussian(10, 5, 1);
    let g = distance_graph(&x, 0, Norm::L2).unwrap();
    for i in 0..10 {
        assert_eq!(g.adjacency.get(i, i), 0.0);
        for j in 0..10 {
            let mut sq = 0.0;
            for k in 0..5 {
                sq += (x.get(i, k) - x.get(j, k)).powi(2);
            }
            assert!((g.adjacency.get(i, j) - sq.sqrt()).abs() < 1e-12);
        }
        let row_sum: f64 = (0..10).map(|j| g.laplacian.get(i, j)).sum();
        assert!(row_sum.abs() < 1e-12, "laplacian rows sum to zero");
    }
}

#[test]
fn laplacian_is_positive_semidefinite() {
    let g = distance_graph(&gaussian(20, 3, 2), 0, Norm::L2).unwrap();
    let mut r = rng::stream(2, &[]);
    for _ in 0..50 {
        let v: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        assert!(g.quadratic_form(&v) >= -1e-9);
    }
    assert!(g.quadratic_form(&[1.0; 20]).abs() < 1e-9);
}

#[test]
fn smoothness_equals_twice_cross_class_sum() {
    for seed in 0..10 {
        let x = gaussian(30, 6, 10 + seed);
        let labels: Vec<usize> = (0..30).map(|i| (i * 7 + seed as usize) % 4).collect();
        let s = ClassIndicatorMatrix::from_labels(&labels, 4).unwrap();
        let sigma = smoothness(&distance_graph(&x, 0, Norm::L2).unwrap(), &s).unwrap();
        let oracle = brute_sigma(&x, &labels);
        assert!(
            (sigma - oracle).abs() <= 1e-9 * oracle,
            "{sigma} vs {oracle}"
        );
    }
}

#[test]
fn single_class_is_perfectly_smooth() {
    let x = gaussian(8, 2, 3);
    let s = ClassIndicatorMatrix::from_labels(&[2; 8], 3).unwrap();
    assert!(
        smoothness(&distance_graph(&x, 0, Norm::L2).unwrap(), &s)
            .unwrap()
            .abs()
            < 1e-12
    );
}

#[test]
fn penalty_sums_layer_differences_of_a_trace() {
    let specs = [
        LayerSpec::Affine {
            input: 3,
            output: 4,
        },
        LayerSpec::Relu,
        LayerSpec::Affine {
            input: 4,
            output: 2,
        },
    ];
    let net = Network::new(3, &specs, 5).unwrap();
    let x = gaussian(12, 3, 5);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let s = ClassIndicatorMatrix::from_labels(&labels, 3).unwrap();
    let trace = net.forward_trace(&x).unwrap();
    let sigmas = layer_sigmas(&trace, &s, &[1, 2, 3], Norm::L2).unwrap();
    for (l, sigma) in sigmas.iter().enumerate() {
        let oracle = brute_sigma(trace.at(l + 1), &labels);
        assert!((sigma - oracle).abs() <= 1e-9 * oracle.max(1.0));
        let g = pairwise_distance_matrix(&trace, l + 1, Norm::L2).unwrap();
        assert_eq!(g.layer, l + 1);
    }
    let expected = (sigmas[1] - sigmas[0]).abs() + (sigmas[2] - sigmas[1]).abs();
    assert_eq!(variation(&sigmas), expected);
    assert!((variation_penalty(&trace, &s).unwrap() - expected).abs() < 1e-9 * expected.max(1.0));
    assert!(pairwise_distance_matrix(&trace, 4, Norm::L2).is_err());
}

#[test]
fn indicator_rejects_bad_labels() {
    assert!(ClassIndicatorMatrix::from_labels(&[0, 3], 3).is_err());
    assert!(ClassIndicatorMatrix::from_labels(&[], 3).is_err());
}
