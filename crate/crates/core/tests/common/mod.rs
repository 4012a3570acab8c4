#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use sslseg::datahub::{Image, LabelMap, LoadedSample};
use sslseg::numerics::Tensor;
use sslseg::pipeline::ExperimentConfig;
use sslseg::seeding::rng_for;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(&[seed, 0x7e57]);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn labels_for(n: usize, classes: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_for(&[seed, 0x1abe]);
    (0..n).map(|_| rng.gen_range(0..classes) as u8).collect()
}

pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = rng_for(&[seed, 0x1a9e]);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_sample(w: usize, h: usize, classes: usize, seed: u64) -> LoadedSample {
    LoadedSample {
        id: format!("s{seed}"),
        image: random_image(w, h, seed),
        labels: Some(LabelMap::new(w, h, labels_for(w * h, classes, seed)).unwrap()),
    }
}

/// A configuration small enough to run the whole pipeline in seconds.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.dir = root.join("data");
    cfg.data.image_size = 16;
    cfg.data.classes = 3;
    cfg.data.n_train = 16;
    cfg.data.n_val = 4;
    cfg.data.labeled_fraction = 0.25;
    cfg.model.width = 2;
    cfg.train.out = root.join("runs");
    cfg.train.teacher_iters = 6;
    cfg.train.student_iters = 4;
    cfg.train.batch_labeled = 2;
    cfg.train.batch_pseudo = 2;
    cfg.train.log_every = 2;
    cfg.augment.crop_size = 16;
    cfg.tta.scales = vec![0.5, 1.0];
    cfg
}
