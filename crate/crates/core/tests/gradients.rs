//! Central finite-difference checks for every differentiable op.

mod common;

use rand::Rng;
use sslseg::losses::{cross_entropy, scl, SclConfig, SclWeight, IGNORE_INDEX};
use sslseg::model::{Bound, MicroSegNet, Mode, ModelConfig};
use sslseg::normalization::{bn_forward_train, AffineVars, BnMode, BranchTag, DsbnState};
use sslseg::numerics::{check_gradients, Conv2dSpec, Tensor};
use sslseg::seeding::rng_for;

use common::{labels_for, random_tensor};

const SEEDS: u64 = 20;
const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(&[seed, 99]);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn conv2d_plain_strided_dilated() {
    for seed in 0..SEEDS {
        for spec in [Conv2dSpec::new(1, 1), Conv2dSpec::new(2, 1), Conv2dSpec::new(1, 2).dilated(2), Conv2dSpec::new(1, 0)] {
            let x = random_tensor(&[2, 3, 6, 5], seed);
            let k = random_tensor(&[4, 3, 3, 3], seed + 1000);
            let err = check_gradients(|t, v| t.conv2d(v[0], v[1], spec), &[x, k], EPS).unwrap();
            assert!(err < TOL, "seed {seed} {spec:?}: {err}");
        }
        let x = random_tensor(&[1, 4, 3, 3], seed);
        let k = random_tensor(&[2, 4, 1, 1], seed + 7);
        let err = check_gradients(|t, v| t.conv2d(v[0], v[1], Conv2dSpec::new(1, 0)), &[x, k], EPS).unwrap();
        assert!(err < TOL, "pointwise seed {seed}: {err}");
    }
}

#[test]
fn relu() {
    for seed in 0..SEEDS {
        let x = away_from_zero(&[2, 3, 4, 4], seed);
        let err = check_gradients(|t, v| t.relu(v[0]), &[x], EPS).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn channel_softmax() {
    for seed in 0..SEEDS {
        let x = random_tensor(&[2, 5, 3, 2], seed).data().iter().map(|v| v * 3.0).collect();
        let x = Tensor::new(&[2, 5, 3, 2], x).unwrap();
        let err = check_gradients(|t, v| t.softmax_channel(v[0]), &[x], EPS).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn bilinear_resize_up_and_down() {
    for seed in 0..SEEDS {
        for (oh, ow) in [(8, 12), (3, 2), (5, 5)] {
            let x = random_tensor(&[2, 2, 4, 6], seed);
            let err = check_gradients(|t, v| t.resize_bilinear(v[0], oh, ow), &[x], EPS).unwrap();
            assert!(err < TOL, "seed {seed} -> {oh}x{ow}: {err}");
        }
    }
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let a = random_tensor(&[3, 4], seed);
        let b = random_tensor(&[3, 4], seed + 50);
        let pos = Tensor::from_fn(&[3, 4], |i| 0.5 + (i as f64 * 0.37 + seed as f64).sin().abs());
        for err in [
            check_gradients(|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], EPS).unwrap(),
            check_gradients(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], EPS).unwrap(),
            check_gradients(|t, v| t.log(v[0]), &[pos.clone()], EPS).unwrap(),
            check_gradients(|t, v| t.exp(v[0]), &[a.clone()], EPS).unwrap(),
            check_gradients(|t, v| t.mean(v[0]), &[a.clone()], EPS).unwrap(),
        ] {
            assert!(err < TOL, "seed {seed}: {err}");
        }
        let x = random_tensor(&[2, 3, 2, 2], seed);
        let bias = random_tensor(&[3], seed + 3);
        let err = check_gradients(|t, v| t.add_channel_bias(v[0], v[1]), &[x, bias], EPS).unwrap();
        assert!(err < TOL, "bias seed {seed}: {err}");
    }
}

#[test]
fn batch_norm_train_all_modes_and_tags() {
    for seed in 0..SEEDS {
        let x = random_tensor(&[3, 4, 3, 3], seed);
        let gamma = Tensor::from_fn(&[4], |i| 0.5 + 0.3 * i as f64);
        let beta = random_tensor(&[4], seed + 11);
        for mode in [BnMode::Dsbn, BnMode::Trainable, BnMode::Fixed] {
            for tag in [BranchTag::Weak, BranchTag::Strong] {
                let mut base = DsbnState::new(4, 0.9, 1e-5).unwrap();
                base.weak.mean = vec![0.1, -0.2, 0.3, 0.0];
                base.weak.var = vec![1.5, 0.7, 2.0, 1.0];
                let err = check_gradients(
                    |t, v| {
                        let mut state = base.clone();
                        bn_forward_train(t, v[0], AffineVars { gamma: v[1], beta: v[2] }, &mut state, tag, mode)
                    },
                    &[x.clone(), gamma.clone(), beta.clone()],
                    EPS,
                )
                .unwrap();
                assert!(err < TOL, "seed {seed} {mode:?} {tag:?}: {err}");
            }
        }
    }
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    for seed in 0..SEEDS {
        let z = random_tensor(&[2, 4, 3, 3], seed);
        let mut labels = labels_for(18, 4, seed);
        labels[seed as usize % 18] = IGNORE_INDEX;
        let err = check_gradients(|t, v| Ok(cross_entropy(t, v[0], &labels, IGNORE_INDEX)?.0), &[z], EPS).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn scl_weight_variants() {
    for seed in 0..SEEDS {
        let z = Tensor::new(&[2, 4, 2, 3], random_tensor(&[2, 4, 2, 3], seed).data().iter().map(|v| v * 2.0).collect()).unwrap();
        let mut labels = labels_for(12, 4, seed + 5);
        labels[(seed as usize * 5) % 12] = IGNORE_INDEX;

        // Numeric side with the confidence weights pinned at the base point.
        let mut tape = sslseg::numerics::Tape::new();
        let zv = tape.param(z.clone());
        let (_, out) = scl(&mut tape, zv, &labels, IGNORE_INDEX, &SclConfig::default()).unwrap();
        let frozen = SclConfig {
            weight: SclWeight::Frozen(out.weights.clone()),
            ..Default::default()
        };
        let err = check_gradients(|t, v| Ok(scl(t, v[0], &labels, IGNORE_INDEX, &frozen)?.0), &[z.clone()], EPS).unwrap();
        assert!(err < TOL, "frozen seed {seed}: {err}");

        // Detached analytic gradient is exactly the frozen one.
        let grad_of = |cfg: &SclConfig| {
            let mut tape = sslseg::numerics::Tape::new();
            let zv = tape.param(z.clone());
            let (l, _) = scl(&mut tape, zv, &labels, IGNORE_INDEX, cfg).unwrap();
            tape.backward(l).unwrap();
            tape.grad(zv).unwrap().to_vec()
        };
        assert_eq!(grad_of(&SclConfig::default()), grad_of(&frozen), "seed {seed}");

        // Attached weights differentiate through the max-softmax as well.
        let attached = SclConfig {
            weight: SclWeight::Attached,
            ..Default::default()
        };
        let err = check_gradients(|t, v| Ok(scl(t, v[0], &labels, IGNORE_INDEX, &attached)?.0), &[z.clone()], EPS).unwrap();
        assert!(err < TOL, "attached seed {seed}: {err}");
    }
}

fn tiny_net(seed: u64) -> MicroSegNet {
    let cfg = ModelConfig {
        width: 2,
        ..Default::default()
    };
    let mut net = MicroSegNet::new(&cfg, 3, seed).unwrap();
    let mut rng = rng_for(&[seed, 3]);
    for b in net.classifier_bias.data_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    for n in &mut net.norms {
        for g in n.gamma.data_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in n.beta.data_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    net
}

#[test]
fn full_network_composition() {
    for seed in 0..SEEDS {
        let net = tiny_net(seed);
        let images = random_tensor(&[2, 3, 8, 8], seed + 77);
        let labels = labels_for(2 * 64, 3, seed + 8);
        let mut inputs = vec![images];
        inputs.extend(net.params().into_iter().cloned());
        for (tag, mode) in [(BranchTag::Weak, BnMode::Dsbn), (BranchTag::Strong, BnMode::Dsbn), (BranchTag::Weak, BnMode::Fixed)] {
            let err = check_gradients(
                |t, v| {
                    let mut n = net.clone();
                    n.bn_mode = mode;
                    let bound = Bound { vars: v[1..].to_vec() };
                    let logits = n.forward(t, &bound, v[0], tag, Mode::Train)?;
                    Ok(cross_entropy(t, logits, &labels, IGNORE_INDEX)?.0)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed} {tag:?} {mode:?}: {err}");
        }
    }
}
