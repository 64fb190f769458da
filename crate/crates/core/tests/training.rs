mod common;

use common::*;
use jacguard::data::{synthetic, Dataset, IdxImages, Split};
use jacguard::jacobian::{frobenius_sq_exact, jacobian_exact};
use jacguard::nn::{softmax_cross_entropy, LayerSpec, Network};
use jacguard::training::*;
use jacguard::{Error, RngStream, Tensor};

fn two_layer(seed: u64) -> Network<f64> {
    let mut rng = RngStream::new(seed);
    let specs = [
        LayerSpec::Dense { out_features: 6 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 4 },
    ];
    randomized(Network::new([1, 2, 3], &specs, &mut rng).unwrap(), &mut rng)
}

fn batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = RngStream::new(seed);
    (random_tensor(&[3, 1, 2, 3], &mut rng, 0.0, 1.0), vec![0, 3, 1])
}

#[test]
fn zero_lambda_is_plain_cross_entropy_bitwise() {
    let net = two_layer(1);
    let (x, y) = batch(2);
    let (parts, grads) = joint_loss(&net, &x, &y, 0.0, JrMode::Exact, &mut RngStream::new(0)).unwrap();
    let (logits, trace) = net.forward(&x).unwrap();
    let (ce, dl) = softmax_cross_entropy(&logits, &y).unwrap();
    assert_eq!(parts.total.to_bits(), ce.to_bits());
    assert_eq!(parts.jr, 0.0);
    assert_eq!(grads, net.backward_params(&trace, &dl).unwrap());
}

#[test]
fn negative_lambda_is_rejected() {
    let net = two_layer(1);
    let (x, y) = batch(2);
    assert!(matches!(
        joint_loss(&net, &x, &y, -0.1, JrMode::Exact, &mut RngStream::new(0)),
        Err(Error::Argument(_))
    ));
}

/// Joint objective recomputed from scratch: CE plus λ/2 times the mean
/// squared Frobenius norm of explicitly extracted Jacobians.
fn joint_oracle(net: &Network<f64>, x: &Tensor<f64>, y: &[usize], lambda: f64) -> f64 {
    let (ce, _) = softmax_cross_entropy(&net.logits(x).unwrap(), y).unwrap();
    let b = y.len();
    let n = net.input_len();
    let fro: f64 = (0..b)
        .map(|i| frobenius_sq_exact(&jacobian_exact(net, &x.data()[i * n..(i + 1) * n]).unwrap().matrix))
        .sum();
    ce + lambda / 2.0 * fro / b as f64
}

#[test]
fn exact_joint_loss_gradient_matches_finite_differences() {
    let net = two_layer(3);
    let (x, y) = batch(4);
    let lambda = 0.05;
    let (parts, grads) = joint_loss(&net, &x, &y, lambda, JrMode::Exact, &mut RngStream::new(0)).unwrap();
    assert!((parts.total - joint_oracle(&net, &x, &y, lambda)).abs() < 1e-12);
    let base = pattern(&net, &x);
    let h = 1e-5;
    let mut checked = 0;
    for (p, t) in net.params().iter().enumerate() {
        for j in 0..t.len() {
            let mut np = net.clone();
            np.params_mut()[p].data_mut()[j] += h;
            let mut nm = net.clone();
            nm.params_mut()[p].data_mut()[j] -= h;
            if pattern(&np, &x) != base || pattern(&nm, &x) != base {
                continue;
            }
            let fd = (joint_oracle(&np, &x, &y, lambda) - joint_oracle(&nm, &x, &y, lambda)) / (2.0 * h);
            let an = grads.tensors[p].data()[j];
            assert!(rel_err(an, fd) <= 1e-3, "param {p}[{j}]: {an} vs {fd}");
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn projection_gradient_is_the_gradient_of_the_estimate() {
    let mut rng = RngStream::new(5);
    let net = randomized(Network::new([1, 8, 8], &tiny_conv_specs(), &mut rng).unwrap(), &mut rng);
    let x = random_tensor(&[2, 1, 8, 8], &mut rng, 0.0, 1.0);
    let y = vec![2, 0];
    for k in [1usize, 3] {
        let mode = JrMode::Projection(k);
        let seed = RngStream::new(40 + k as u64);
        let (_, grads) = joint_loss(&net, &x, &y, 0.1, mode, &mut seed.clone()).unwrap();
        let loss = |n: &Network<f64>| joint_loss(n, &x, &y, 0.1, mode, &mut seed.clone()).unwrap().0.total;
        let base = pattern(&net, &x);
        let h = 1e-5;
        let mut checked = 0;
        for (p, t) in net.params().iter().enumerate() {
            for j in (0..t.len()).step_by(3) {
                let mut np = net.clone();
                np.params_mut()[p].data_mut()[j] += h;
                let mut nm = net.clone();
                nm.params_mut()[p].data_mut()[j] -= h;
                if pattern(&np, &x) != base || pattern(&nm, &x) != base {
                    continue;
                }
                let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
                assert!(rel_err(grads.tensors[p].data()[j], fd) <= 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}

#[test]
fn linear_model_penalty_is_half_lambda_weight_norm() {
    let mut rng = RngStream::new(6);
    let w = random_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let specs = [LayerSpec::Dense { out_features: 4 }];
    let net = Network::from_params([1, 1, 5], &specs, vec![w.clone(), Tensor::zeros(&[4])]).unwrap();
    let x = random_tensor(&[3, 1, 1, 5], &mut rng, 0.0, 1.0);
    let (parts, grads) = joint_loss(&net, &x, &[0, 1, 2], 0.3, JrMode::Exact, &mut rng).unwrap();
    let w2: f64 = w.data().iter().map(|v| v * v).sum();
    assert!((parts.jr - 0.15 * w2).abs() < 1e-12);
    // d/dW of λ/2‖W‖² is λW on top of the cross-entropy gradient.
    let (_, plain) = joint_loss(&net, &x, &[0, 1, 2], 0.0, JrMode::Exact, &mut rng).unwrap();
    for ((g, p), wv) in grads.tensors[0].data().iter().zip(plain.tensors[0].data()).zip(w.data()) {
        assert!((g - p - 0.3 * wv).abs() < 1e-12);
    }
}

#[test]
fn constant_logit_net_predicts_class_zero() {
    let mut rng = RngStream::new(7);
    let mut labels: Vec<u8> = (0..200).map(|i| (i % 10) as u8).collect();
    labels[5] = 0;
    labels[15] = 0;
    let n = labels.len();
    let pixels: Vec<u8> = (0..n * 144).map(|_| rng.index(256) as u8).collect();
    let ds = Dataset::new("t", Split::Test, IdxImages { rows: 12, cols: 12, pixels }, labels).unwrap();
    let net = Network::<f32>::zeros([1, 12, 12], &jacguard::nn::lenet_specs(10)).unwrap();
    let freq = ds.class_counts()[0] as f64 / n as f64;
    assert_eq!(evaluate_clean(&net, &ds).unwrap(), freq);
    assert_eq!(freq, 22.0 / 200.0);
}

#[test]
fn oracle_logits_give_full_accuracy() {
    // Image k is the one-hot of its label; an identity dense layer returns it as logits.
    let labels: Vec<u8> = (0..30).map(|i| (i * 7 % 10) as u8).collect();
    let pixels: Vec<u8> = labels.iter().flat_map(|&l| (0..10).map(move |k| if k == l { 255 } else { 0 })).collect();
    let ds = Dataset::new("t", Split::Test, IdxImages { rows: 1, cols: 10, pixels }, labels).unwrap();
    let specs = [LayerSpec::Dense { out_features: 10 }];
    let net = Network::<f64>::from_params([1, 1, 10], &specs, vec![Tensor::eye(10), Tensor::zeros(&[10])]).unwrap();
    assert_eq!(evaluate_clean(&net, &ds).unwrap(), 1.0);
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 25,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let mut rng = RngStream::new(8);
    let train_set = synthetic(500, 12, Split::Train, &mut rng).unwrap();
    let test_set = synthetic(200, 12, Split::Test, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..small_config(3)
    };
    let a = train::<f32>(&cfg, &train_set, Some(&test_set)).unwrap();
    let b = train::<f32>(&cfg, &train_set, Some(&test_set)).unwrap();
    for (p, q) in a.network.params().iter().zip(b.network.params()) {
        let pb: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u32> = q.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, qb);
    }
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.len(), 4);
    assert!(a.final_accuracy().unwrap() > 0.9, "{:?}", a.metrics);
    assert!(a.metrics[3].train_loss < a.metrics[0].train_loss);
}

#[test]
fn jr_training_records_penalty_and_shrinks_jacobians() {
    let mut rng = RngStream::new(9);
    let train_set = synthetic(500, 12, Split::Train, &mut rng).unwrap();
    let plain = train::<f64>(&small_config(1), &train_set, None).unwrap();
    let jr_cfg = TrainConfig {
        lambda_jr: 0.5,
        ..small_config(1)
    };
    let jr = train::<f64>(&jr_cfg, &train_set, None).unwrap();
    assert!(jr.metrics.iter().all(|m| m.jr_term > 0.0));
    assert!(plain.metrics.iter().all(|m| m.jr_term == 0.0));
    let x = train_set.images::<f64>();
    let mean_fro = |net: &Network<f64>| {
        (0..50)
            .map(|i| frobenius_sq_exact(&jacobian_exact(net, x.row(i)).unwrap().matrix).sqrt())
            .sum::<f64>()
    };
    assert!(mean_fro(&jr.network) < mean_fro(&plain.network));
}

#[test]
fn jacobian_norm_decreases_along_the_lambda_grid() {
    let mut rng = RngStream::new(19);
    let train_set = synthetic(500, 12, Split::Train, &mut rng).unwrap();
    let test_set = synthetic(100, 12, Split::Test, &mut rng).unwrap();
    let x = test_set.images::<f64>();
    let means: Vec<f64> = [0.0, 0.01, 0.05, 0.1]
        .iter()
        .map(|&lambda_jr| {
            let mut total = 0.0;
            for seed in 1..=3 {
                let cfg = TrainConfig {
                    lambda_jr,
                    epochs: 3,
                    ..small_config(seed)
                };
                let net = train::<f64>(&cfg, &train_set, None).unwrap().network;
                total += (0..100)
                    .map(|i| frobenius_sq_exact(&jacobian_exact(&net, x.row(i)).unwrap().matrix).sqrt())
                    .sum::<f64>()
                    / 100.0;
            }
            total / 3.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn uat_with_zero_budget_equals_standard_training() {
    let mut rng = RngStream::new(10);
    let train_set = synthetic(300, 12, Split::Train, &mut rng).unwrap();
    let std_model = train::<f32>(&small_config(4), &train_set, None).unwrap();
    let uat_cfg = TrainConfig {
        uat: Some(UatConfig::new(0.0)),
        ..small_config(4)
    };
    let uat_model = uat_train::<f32>(&uat_cfg, &train_set, None).unwrap();
    let losses = |m: &TrainedModel<f32>| m.metrics.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&std_model), losses(&uat_model));
    for (p, q) in std_model.network.params().iter().zip(uat_model.network.params()) {
        assert_eq!(p.data(), q.data());
    }
    assert!(uat_train::<f32>(&small_config(4), &train_set, None).is_err());
}

#[test]
fn uat_training_runs_with_budget() {
    let mut rng = RngStream::new(11);
    let train_set = synthetic(300, 12, Split::Train, &mut rng).unwrap();
    let cfg = TrainConfig {
        uat: Some(UatConfig::new(0.2)),
        ..small_config(5)
    };
    let m = uat_train::<f32>(&cfg, &train_set, Some(&train_set)).unwrap();
    assert!(m.metrics.iter().all(|e| e.train_loss.is_finite()));
}

#[test]
fn divergence_is_reported() {
    let mut rng = RngStream::new(12);
    let train_set = synthetic(200, 12, Split::Train, &mut rng).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::SgdMomentum { lr: 1e30, momentum: 0.9 },
        ..small_config(6)
    };
    let err = train::<f32>(&cfg, &train_set, None).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}

#[test]
fn perturbation_gradient_respects_clamp() {
    let mut rng = RngStream::new(13);
    let net = randomized(Network::new([1, 8, 8], &tiny_conv_specs(), &mut rng).unwrap(), &mut rng);
    let mut x = random_tensor(&[2, 1, 8, 8], &mut rng, 0.0, 1.0);
    x.data_mut()[0] = 1.0;
    x.data_mut()[64] = 0.95;
    let mut delta = vec![0.0; 64];
    delta[0] = 0.1;
    let (_, g) = perturbation_gradient(&net, &x, &[0, 1], &delta, true).unwrap();
    let (_, trace) = {
        let mut xp = x.clone();
        perturb_clamped(&mut xp, &delta);
        net.forward(&xp).unwrap()
    };
    let logits = net.logits(&{
        let mut xp = x.clone();
        perturb_clamped(&mut xp, &delta);
        xp
    })
    .unwrap();
    let (_, dl) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
    let gx = net.backward_input(&trace, &dl).unwrap();
    // Both samples exceed 1 at pixel 0, so neither contributes there.
    assert_eq!(g[0], 0.0);
    assert!((g[1] - (gx.data()[1] + gx.data()[65])).abs() < 1e-15);
}
