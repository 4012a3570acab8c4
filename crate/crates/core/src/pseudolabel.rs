//! Hard pseudo labels from multi-scale and flip test-time augmentation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{flip_horizontal, FloatImage};
use crate::datahub::{read_image, write_labels, LabelMap, Manifest, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::model::MicroSegNet;
use crate::numerics::{resize_planes, softmax_channels, Tensor};

/// The `[tta]` config table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Images per forward pass during generation.
    pub batch: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            scales: vec![0.5, 0.75, 1.0, 1.5, 1.75],
            flip: true,
            batch: 16,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("tta.scales must not be empty".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("tta.scales entries must be positive, got {s}")));
        }
        if self.batch == 0 {
            return Err(Error::Config("tta.batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `round(extent·scale / 4)·4`: the network needs multiples of 4.
pub fn tta_extent(extent: usize, scale: f64) -> usize {
    ((extent as f64 * scale / 4.0).round() as usize) * 4
}

fn flip_planes(data: &mut [f64], h: usize, w: usize) {
    for plane in data.chunks_mut(h * w) {
        flip_horizontal(plane, w, h, 1);
    }
}

/// Averaged class probabilities `[N, C, H, W]` over every scale (and its
/// mirror when `cfg.flip`) for a batch of normalized images `[N, 3, H, W]`.
pub fn tta_predict(net: &MicroSegNet, images: &Tensor, cfg: &TtaConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, ch, h, w) = images.dims4("tta input")?;
    if ch != 3 {
        return Err(Error::Dimension(format!("tta input needs 3 channels, got {ch}")));
    }
    let c = net.classes;
    let mut passes = Vec::new();
    for &s in &cfg.scales {
        let (sh, sw) = (tta_extent(h, s), tta_extent(w, s));
        if sh < 4 || sw < 4 {
            return Err(Error::Geometry(format!(
                "scale {s} shrinks the {h}x{w} input to {sh}x{sw}, below 4x4"
            )));
        }
        let scaled = resize_planes(images.data(), n * 3, h, w, sh, sw);
        for mirrored in [false, true].into_iter().take(if cfg.flip { 2 } else { 1 }) {
            let mut input = scaled.clone();
            if mirrored {
                flip_planes(&mut input, sh, sw);
            }
            let logits = net.predict(&Tensor::new(&[n, 3, sh, sw], input)?)?;
            let mut probs = softmax_channels(logits.data(), n, c, sh * sw);
            if mirrored {
                flip_planes(&mut probs, sh, sw);
            }
            passes.push(resize_planes(&probs, n * c, sh, sw, h, w));
        }
    }
    Tensor::new(&[n, c, h, w], average_maps(&passes))
}

/// Elementwise arithmetic mean of equally long maps.
pub fn average_maps(maps: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = maps.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let k = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Per-pixel argmax over `c` class planes; ties go to the lowest index.
pub fn harden(probs: &[f64], c: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if probs[k * plane + i] > probs[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// What [`generate_semi_dataset`] produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemiDataset {
    pub manifest: Manifest,
    /// `(sample id, error message)` for every image that could not be labeled.
    pub failures: Vec<(String, String)>,
}

/// Labels every unlabeled sample with the teacher and writes `labels/<id>.pgm`
/// plus `manifest.tsv` under `out_dir`. Unreadable images are recorded in
/// [`SemiDataset::failures`] and skipped.
pub fn generate_semi_dataset(
    teacher: &MicroSegNet,
    unlabeled: &[Sample],
    cfg: &TtaConfig,
    mean: [f64; 3],
    out_dir: &Path,
) -> Result<SemiDataset> {
    cfg.validate()?;
    let label_dir = out_dir.join("labels");
    std::fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    let mut failures = Vec::new();
    let mut ready: Vec<(&Sample, FloatImage)> = Vec::new();
    for s in unlabeled {
        match read_image(&s.image) {
            Ok(img) => {
                let mut f = FloatImage::from_image(&img);
                f.subtract_mean(mean);
                ready.push((s, f));
            }
            Err(e) => failures.push((s.id.clone(), e.to_string())),
        }
    }
    let mut samples = Vec::with_capacity(ready.len());
    let mut start = 0;
    while start < ready.len() {
        let (w, h) = (ready[start].1.width, ready[start].1.height);
        let mut end = start + 1;
        while end < ready.len() && end - start < cfg.batch && (ready[end].1.width, ready[end].1.height) == (w, h) {
            end += 1;
        }
        let chunk = &ready[start..end];
        let imgs: Vec<&FloatImage> = chunk.iter().map(|(_, f)| f).collect();
        let batch = crate::augment::stack_planar(&imgs)?;
        match tta_predict(teacher, &batch, cfg) {
            Ok(probs) => {
                let (c, plane) = (teacher.classes, w * h);
                for (k, (s, _)) in chunk.iter().enumerate() {
                    let labels = harden(&probs.data()[k * c * plane..(k + 1) * c * plane], c, plane);
                    let path: PathBuf = label_dir.join(format!("{}.pgm", s.id));
                    write_labels(&path, &LabelMap::new(w, h, labels)?)?;
                    samples.push(Sample {
                        id: s.id.clone(),
                        image: s.image.clone(),
                        label: Some(path),
                        provenance: Provenance::Pseudo,
                        split: Split::TrainUnlabeled,
                    });
                }
            }
            Err(e) => failures.extend(chunk.iter().map(|(s, _)| (s.id.clone(), e.to_string()))),
        }
        start = end;
    }
    let manifest = Manifest::new(samples);
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(SemiDataset { manifest, failures })
}
