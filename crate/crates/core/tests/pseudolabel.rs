mod common;

use sslseg::datahub::{generate_dataset, read_labels, Manifest, Provenance, Sample, Split, SyntheticSpec};
use sslseg::model::{MicroSegNet, ModelConfig};
use sslseg::numerics::{softmax_channels, Tensor};
use sslseg::pseudolabel::{generate_semi_dataset, harden, tta_predict, TtaConfig};
use sslseg::Error;

use common::random_tensor;

fn net(seed: u64) -> MicroSegNet {
    MicroSegNet::new(&ModelConfig { width: 3, ..Default::default() }, 4, seed).unwrap()
}

/// All-zero weights; only the classifier bias differs between classes.
fn constant_net() -> MicroSegNet {
    let mut n = net(0);
    for t in n.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    n.classifier_bias = Tensor::new(&[4], vec![0.3, -1.0, 0.7, 0.1]).unwrap();
    n
}

#[test]
fn single_pass_degeneracy() {
    let n = net(1);
    let x = random_tensor(&[2, 3, 16, 12], 3);
    let cfg = TtaConfig { scales: vec![1.0], flip: false, batch: 4 };
    let got = tta_predict(&n, &x, &cfg).unwrap();
    let want = softmax_channels(n.predict(&x).unwrap().data(), 2, 4, 16 * 12);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn spatially_constant_teacher() {
    let n = constant_net();
    let x = random_tensor(&[1, 3, 16, 16], 4);
    let single = tta_predict(&n, &x, &TtaConfig { scales: vec![1.0], flip: false, batch: 1 }).unwrap();
    let full = tta_predict(&n, &x, &TtaConfig::default()).unwrap();
    let no_flip = tta_predict(&n, &x, &TtaConfig { flip: false, ..Default::default() }).unwrap();
    for ((a, b), c) in full.data().iter().zip(single.data()).zip(no_flip.data()) {
        assert!((a - b).abs() < 1e-12);
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn probabilities_sum_to_one() {
    let n = net(2);
    let x = random_tensor(&[2, 3, 20, 16], 5);
    let p = tta_predict(&n, &x, &TtaConfig::default()).unwrap();
    let plane = 20 * 16;
    for b in 0..2 {
        for i in 0..plane {
            let s: f64 = (0..4).map(|c| p.data()[(b * 4 + c) * plane + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn flip_pass_is_the_mirror_of_the_unflipped_pass() {
    // With a horizontally mirrored input, the flipped pass of the original
    // equals the unflipped pass of the mirror, so flip-on outputs of the two
    // inputs are mirror images of each other.
    let n = net(3);
    let x = random_tensor(&[1, 3, 12, 16], 6);
    let mut mirrored = x.clone();
    for row in mirrored.data_mut().chunks_mut(16) {
        row.reverse();
    }
    let cfg = TtaConfig { scales: vec![1.0, 0.5], flip: true, batch: 1 };
    let a = tta_predict(&n, &x, &cfg).unwrap();
    let mut b = tta_predict(&n, &mirrored, &cfg).unwrap();
    for row in b.data_mut().chunks_mut(16) {
        row.reverse();
    }
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn tiny_scales_are_geometry_errors() {
    let n = net(0);
    let x = random_tensor(&[1, 3, 8, 8], 0);
    let cfg = TtaConfig { scales: vec![0.2], flip: false, batch: 1 };
    assert!(matches!(tta_predict(&n, &x, &cfg), Err(Error::Geometry(_))));
}

#[test]
fn harden_is_idempotent_through_one_hot() {
    let p = softmax_channels(random_tensor(&[1, 5, 4, 4], 7).data(), 1, 5, 16);
    let h = harden(&p, 5, 16);
    let mut onehot = vec![0.0; 5 * 16];
    for (i, &c) in h.iter().enumerate() {
        onehot[c as usize * 16 + i] = 1.0;
    }
    assert_eq!(harden(&onehot, 5, 16), h);
}

#[test]
fn semi_dataset_generation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { image_size: 16, ..Default::default() };
    let m = generate_dataset(&spec, 5, 0, &dir.path().join("data")).unwrap();
    let mut unlabeled: Vec<Sample> = m
        .samples
        .iter()
        .map(|s| Sample { label: None, provenance: Provenance::None, split: Split::TrainUnlabeled, ..s.clone() })
        .collect();
    let teacher = net(4);
    let cfg = TtaConfig { scales: vec![0.5, 1.0], ..Default::default() };
    let mean = [0.5; 3];

    let a = generate_semi_dataset(&teacher, &unlabeled, &cfg, mean, &dir.path().join("a")).unwrap();
    let b = generate_semi_dataset(&teacher, &unlabeled, &cfg, mean, &dir.path().join("b")).unwrap();
    assert_eq!(a.manifest.samples.len(), 5);
    assert!(a.failures.is_empty());
    for (sa, sb) in a.manifest.samples.iter().zip(&b.manifest.samples) {
        assert_eq!(sa.provenance, Provenance::Pseudo);
        let (la, lb) = (sa.label.as_ref().unwrap(), sb.label.as_ref().unwrap());
        assert_eq!(std::fs::read(la).unwrap(), std::fs::read(lb).unwrap());
        assert!(read_labels(la, 4).is_ok());
    }
    let reread = Manifest::read(&dir.path().join("a").join("manifest.tsv"), true).unwrap();
    assert_eq!(reread, a.manifest);

    unlabeled[2].image = dir.path().join("missing.ppm");
    let c = generate_semi_dataset(&teacher, &unlabeled, &cfg, mean, &dir.path().join("c")).unwrap();
    assert_eq!(c.manifest.samples.len(), 4);
    assert_eq!(c.failures.len(), 1);
    assert_eq!(c.failures[0].0, unlabeled[2].id);

    let empty = generate_semi_dataset(&teacher, &[], &cfg, mean, &dir.path().join("d")).unwrap();
    assert!(empty.manifest.samples.is_empty() && empty.failures.is_empty());
}
