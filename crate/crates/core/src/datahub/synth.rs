//! Procedural segmentation scenes: colored ellipses, rectangles and
//! triangles on noisy backgrounds, with exact per-pixel labels.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

use super::manifest::{write_mean, Manifest, Provenance, Sample, Split};
use super::pnm::{write_image, write_labels, Image, LabelMap};

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Background plus `classes − 1` shape classes.
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Standard deviation of per-pixel Gaussian noise, in [0,1] intensity units.
    pub noise: f64,
    /// Half-width of the uniform per-channel jitter around each class color.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            classes: 4,
            shapes_min: 2,
            shapes_max: 4,
            noise: 0.08,
            color_jitter: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "data.classes must lie in 2..=255, got {}",
                self.classes
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("data.image_size must be ≥ 4, got {}", self.image_size)));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("data.shapes_min exceeds data.shapes_max".into()));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("data.noise and data.color_jitter must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    /// Whether the point `(x, y)` (pixel units, origin at the top-left corner) lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Geometry::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (c * dx + s * dy).abs() <= hw && (-s * dx + c * dy).abs() <= hh
            }
            Geometry::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: u8,
    pub geometry: Geometry,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub image: Image,
    pub labels: LabelMap,
    /// In painting order; later shapes occlude earlier ones.
    pub shapes: Vec<PlacedShape>,
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    // evenly spaced hues, saturation 0.7, value 0.85
    let h = (class - 1) as f64 / (classes - 1) as f64 * 6.0;
    let (s, v) = (0.7, 0.85);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_shape(rng: &mut impl Rng, spec: &SyntheticSpec) -> PlacedShape {
    let size = spec.image_size as f64;
    let class = rng.gen_range(1..spec.classes);
    let cx = rng.gen_range(0.1 * size..0.9 * size);
    let cy = rng.gen_range(0.1 * size..0.9 * size);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let r = |rng: &mut dyn rand::RngCore| rng.gen_range(0.08 * size..0.2 * size);
    let geometry = match (class - 1) % 3 {
        0 => Geometry::Ellipse { cx, cy, rx: r(rng), ry: r(rng), angle },
        1 => Geometry::Rect { cx, cy, hw: r(rng), hh: r(rng), angle },
        _ => {
            let radius = rng.gen_range(0.12 * size..0.25 * size);
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let a = angle + k as f64 * 2.0 * std::f64::consts::PI / 3.0 + rng.gen_range(-0.3..0.3);
                *p = (cx + radius * a.cos(), cy + radius * a.sin());
            }
            Geometry::Triangle { pts }
        }
    };
    let base = class_color(class, spec.classes);
    let mut color = [0.0; 3];
    for (c, b) in color.iter_mut().zip(base) {
        *c = (b + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0);
    }
    PlacedShape {
        class: class as u8,
        geometry,
        color,
    }
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::TrainLabeled | Split::TrainUnlabeled => 1,
        Split::Val => 2,
    }
}

/// Renders scene `index` of `split`; deterministic in `(spec, split, index)`.
pub fn render_sample(spec: &SyntheticSpec, split: Split, index: usize) -> RenderedSample {
    let mut rng = rng_for(&[spec.seed, split_code(split), index as u64]);
    let n = spec.image_size;
    let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    let shapes: Vec<PlacedShape> = (0..count).map(|_| random_shape(&mut rng, spec)).collect();

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let tilt: [f64; 2] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");

    let mut labels = vec![0u8; n * n];
    let mut data = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = shapes.iter().rev().find(|s| s.geometry.contains(px, py));
            let (label, color) = match hit {
                Some(s) => (s.class, s.color),
                None => {
                    let shade = tilt[0] * (px / n as f64 - 0.5) + tilt[1] * (py / n as f64 - 0.5);
                    (0, bg.map(|c| c + shade))
                }
            };
            labels[y * n + x] = label;
            for ch in 0..3 {
                let v = color[ch] + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data[(y * n + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RenderedSample {
        image: Image::new(n, n, data).expect("sized"),
        labels: LabelMap::new(n, n, labels).expect("sized"),
        shapes,
    }
}

/// Per-channel mean intensity in [0,1] over a set of images.
pub fn channel_mean<'a>(images: impl IntoIterator<Item = &'a Image>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        for px in img.data.chunks(3) {
            for ch in 0..3 {
                acc[ch] += px[ch] as f64 / 255.0;
            }
        }
        count += img.width * img.height;
    }
    if count == 0 {
        return [0.5; 3];
    }
    acc.map(|a| a / count as f64)
}

/// Renders and writes a dataset under `out_dir`: `images/`, `labels/`,
/// `manifest.tsv` and `mean.txt` (computed over the training images, or over
/// the validation images when there are none).
pub fn generate_dataset(spec: &SyntheticSpec, n_train: usize, n_val: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::new();
    let mut train_images = Vec::new();
    let mut val_images = Vec::new();
    let jobs = (0..n_train)
        .map(|i| (Split::TrainLabeled, i, format!("train_{i:05}")))
        .chain((0..n_val).map(|i| (Split::Val, i, format!("val_{i:05}"))));
    for (split, index, id) in jobs {
        let r = render_sample(spec, split, index);
        let image: PathBuf = out_dir.join("images").join(format!("{id}.ppm"));
        let label: PathBuf = out_dir.join("labels").join(format!("{id}.pgm"));
        write_image(&image, &r.image)?;
        write_labels(&label, &r.labels)?;
        samples.push(Sample {
            id,
            image,
            label: Some(label),
            provenance: Provenance::GroundTruth,
            split,
        });
        if split == Split::Val {
            val_images.push(r.image);
        } else {
            train_images.push(r.image);
        }
    }
    let mean = if train_images.is_empty() {
        channel_mean(&val_images)
    } else {
        channel_mean(&train_images)
    };
    write_mean(&out_dir.join("mean.txt"), mean)?;
    let manifest = Manifest::new(samples);
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
