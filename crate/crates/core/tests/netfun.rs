use rand::Rng;

use robustlip::autodiff::{finite_diff_check, Tape, Var};
use robustlip::datascope::{margin_output, synth_blobs, BlobSpec};
use robustlip::netfun::{
    argmax_rows, read_checkpoint, train, write_checkpoint, BnMode, Layer, LayerSpec, Network,
    Regularizer, TrainConfig,
};
use robustlip::{rng, Norm, Tensor};

fn blobs(separation: f64, seed: u64) -> robustlip::LabeledDataset {
    synth_blobs(&BlobSpec {
        classes: 2,
        per_class: 30,
        dim: 2,
        separation,
        noise_sd: 0.1,
        seed,
    })
    .unwrap()
}

fn residual_net(seed: u64) -> Network {
    let w = 5;
    let mut specs = vec![
        LayerSpec::Affine {
            input: 3,
            output: w,
        },
        LayerSpec::Relu,
    ];
    specs.extend((0..3).map(|_| LayerSpec::ResidualBlock { dim: w }));
    specs.push(LayerSpec::Affine {
        input: w,
        output: 2,
    });
    specs.push(LayerSpec::Softmax);
    Network::new(3, &specs, seed).unwrap()
}

#[test]
fn trace_matches_layerwise_recomputation() {
    let mut net = residual_net(4);
    // non-trivial running statistics so the frozen maps are not identities
    let mut r = rng::stream(4, &[1]);
    for layer in net.layers_mut() {
        if let Layer::Residual(b) = layer {
            for bn in [&mut b.bn1, &mut b.bn2] {
                bn.running_mean = (0..bn.dim()).map(|_| r.random_range(-0.5..0.5)).collect();
                bn.running_var = (0..bn.dim()).map(|_| r.random_range(0.5..2.0)).collect();
            }
        }
    }
    let x = Tensor::matrix(7, 3, (0..21).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let trace = net.forward_trace(&x).unwrap();
    assert_eq!(trace.depth(), net.depth());

    let mut rep = x.clone();
    for (l, layer) in net.layers().iter().enumerate() {
        rep = match layer {
            Layer::Affine(a) => {
                let mut out = Tensor::zeros(&[rep.rows(), a.output_dim()]);
                for i in 0..rep.rows() {
                    for o in 0..a.output_dim() {
                        let mut s = a.bias.data()[o];
                        for k in 0..a.input_dim() {
                            s += a.weight.get(o, k) * rep.get(i, k);
                        }
                        out.set(i, o, s);
                    }
                }
                out
            }
            other => other.forward(&rep).unwrap(),
        };
        let tap = trace.at(l + 1);
        for (a, b) in tap.data().iter().zip(rep.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "layer {}", l + 1);
        }
        assert_eq!(&net.forward_prefix(l + 1, &x).unwrap(), tap);
    }
    assert_eq!(trace.output(), &net.forward(&x).unwrap());
}

#[test]
fn residual_block_is_its_definition() {
    let net = residual_net(9);
    let Layer::Residual(b) = &net.layers()[2] else {
        panic!("layer 3 is a residual block")
    };
    let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let h = b.fc1.forward(&x).unwrap();
    let h = b.bn1.forward(&h).unwrap();
    let h = h.map(|v| v.max(0.0));
    let h = b.fc2.forward(&h).unwrap();
    let h = b.bn2.forward(&h).unwrap();
    let expected = x.add(&h).unwrap().map(|v| v.max(0.0));
    assert_eq!(b.forward(&x).unwrap(), expected);
}

#[test]
fn two_layer_program_gradients() {
    for seed in 0..10 {
        let mut r = rng::stream(seed, &[47]);
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let x = t(&[6, 4]);
        let params = [t(&[5, 4]), t(&[5]), t(&[3, 5]), t(&[3])];
        let targets = robustlip::datascope::one_hot(&[0, 1, 2, 0, 1, 2], 3);
        let prog = |tape: &mut Tape, x: Var, p: &[Var]| {
            let h = tape.affine(x, p[0], p[1])?;
            let h = tape.relu(h)?;
            let z = tape.affine(h, p[2], p[3])?;
            tape.softmax_cross_entropy(z, &targets)
        };
        let err = finite_diff_check(&prog, &x, &params, 1e-6).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn separable_blobs_train_to_full_accuracy() {
    let data = blobs(10.0, 1);
    let specs = [
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
    ];
    let init = Network::new(2, &specs, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let (net, log) = train(&init, &data, &cfg).unwrap();
    assert_eq!(log.train_accuracy, 1.0);
    let pred = net.predict(data.inputs()).unwrap();
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    assert_eq!(hits as f64 / data.len() as f64, log.train_accuracy);
    assert_eq!(pred, argmax_rows(&net.forward(data.inputs()).unwrap()));

    // delta and the output margin follow from the trained outputs
    let delta = net.delta.unwrap();
    assert!(delta.l2 < 0.2, "{delta:?}");
    let out = net.forward(data.inputs()).unwrap();
    let worst = (0..data.len())
        .map(|i| {
            let mut target = vec![0.0; 2];
            target[data.labels()[i]] = 1.0;
            Norm::L2.dist(out.row(i), &target)
        })
        .fold(0.0, f64::max);
    assert!((delta.l2 - worst).abs() < 1e-12);
    assert_eq!(
        margin_output(&net, Norm::L2).unwrap(),
        std::f64::consts::SQRT_2 - delta.l2
    );
}

#[test]
fn laplacian_training_logs_both_terms() {
    let data = blobs(4.0, 2);
    let specs = [
        LayerSpec::Affine {
            input: 2,
            output: 6,
        },
        LayerSpec::Relu,
        LayerSpec::Affine {
            input: 6,
            output: 2,
        },
    ];
    let init = Network::new(2, &specs, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 5,
        regularizer: Regularizer::Laplacian { weight: 1e-2 },
        ..TrainConfig::default()
    };
    let (_, log) = train(&init, &data, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 5);
    for e in &log.epochs {
        assert!(e.cross_entropy.is_finite() && e.variation.is_finite() && e.variation > 0.0);
        assert!(!e.sigmas.is_empty());
    }
    let mut csv = Vec::new();
    log.write_loss_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,loss,cross_entropy,variation\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = blobs(3.0, 6);
    let specs = [
        LayerSpec::Affine {
            input: 2,
            output: 4,
        },
        LayerSpec::Batchnorm { dim: 4 },
        LayerSpec::Relu,
        LayerSpec::ResidualBlock { dim: 4 },
        LayerSpec::Affine {
            input: 4,
            output: 2,
        },
    ];
    let init = Network::new(2, &specs, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        seed: 8,
        batchnorm_mode: BnMode::Train,
        ..TrainConfig::default()
    };
    let (a, _) = train(&init, &data, &cfg).unwrap();
    let (b, _) = train(&init, &data, &cfg).unwrap();
    assert_eq!(a, b);

    let mut bytes = Vec::new();
    write_checkpoint(&a, &mut bytes).unwrap();
    let back = read_checkpoint(&mut &bytes[..]).unwrap();
    assert_eq!(back, a);
    assert_eq!(
        back.forward(data.inputs()).unwrap(),
        a.forward(data.inputs()).unwrap()
    );
    assert!(bytes.starts_with(b"robustlip-checkpoint 1\n"));
}
