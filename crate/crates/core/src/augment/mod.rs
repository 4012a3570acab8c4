//! Strong photometric augmentation policies and the basic geometric pipeline.

mod geometric;
mod photometric;

pub use geometric::{apply_geometric, flip_horizontal, resize_image, resize_labels_nearest, GeometricTransform};
pub use photometric::{hsv_to_rgb, rgb_to_hsv, Distortion};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An RGB image stored row-major, interleaved, as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(FloatImage { width, height, data })
    }

    pub fn from_image(img: &Image) -> Self {
        FloatImage {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Quantizes back to 8 bits, clamping to [0,1] first.
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image::new(self.width, self.height, data).expect("sized")
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Channel-planar copy (`3·H·W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + i] = px[ch];
            }
        }
        out
    }

    pub fn subtract_mean(&mut self, mean: [f64; 3]) {
        for px in self.data.chunks_mut(3) {
            for ch in 0..3 {
                px[ch] -= mean[ch];
            }
        }
    }
}

/// Stacks equally sized images into a `[N, 3, H, W]` tensor.
pub fn stack_planar(images: &[&FloatImage]) -> Result<Tensor> {
    let (w, h) = images
        .first()
        .map(|i| (i.width, i.height))
        .ok_or_else(|| Error::Dimension("cannot stack an empty image list".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Dimension(format!(
                "cannot stack a {}x{} image with {w}x{h} ones",
                img.width, img.height
            )));
        }
        data.extend(img.to_planar());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Photometric,
    Geometric,
}

/// Every transform an augmentation policy can name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpName {
    ContrastGamma,
    ContrastLinear,
    Brightness,
    BrightnessChannel,
    Equalize,
    Hsv,
    InvertChannel,
    Blur,
    NoiseGaussian,
    NoisePoisson,
    ChannelShuffle,
    Dropout,
    CoarseDropout,
    Multiply,
    SaltPepper,
    Solarize,
    JpegCompression,
    RandomScale,
    RandomFlip,
    RandomCrop,
    Normalization,
}

/// The photometric pool sampled by [`sample_policy`].
pub const PHOTOMETRIC_POOL: [OpName; 17] = [
    OpName::ContrastGamma,
    OpName::ContrastLinear,
    OpName::Brightness,
    OpName::BrightnessChannel,
    OpName::Equalize,
    OpName::Hsv,
    OpName::InvertChannel,
    OpName::Blur,
    OpName::NoiseGaussian,
    OpName::NoisePoisson,
    OpName::ChannelShuffle,
    OpName::Dropout,
    OpName::CoarseDropout,
    OpName::Multiply,
    OpName::SaltPepper,
    OpName::Solarize,
    OpName::JpegCompression,
];

/// Appended to every sampled policy, in this order.
pub const BASIC_TRANSFORMS: [OpName; 4] = [
    OpName::RandomScale,
    OpName::RandomFlip,
    OpName::RandomCrop,
    OpName::Normalization,
];

impl OpName {
    pub fn kind(self) -> OpKind {
        if PHOTOMETRIC_POOL.contains(&self) {
            OpKind::Photometric
        } else {
            OpKind::Geometric
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpName::ContrastGamma => "contrast_gamma",
            OpName::ContrastLinear => "contrast_linear",
            OpName::Brightness => "brightness",
            OpName::BrightnessChannel => "brightness_channel",
            OpName::Equalize => "equalize",
            OpName::Hsv => "hsv",
            OpName::InvertChannel => "invert_channel",
            OpName::Blur => "blur",
            OpName::NoiseGaussian => "noise_gau",
            OpName::NoisePoisson => "noise_pos",
            OpName::ChannelShuffle => "channel_shuffle",
            OpName::Dropout => "dropout",
            OpName::CoarseDropout => "coarse_dropout",
            OpName::Multiply => "multiply",
            OpName::SaltPepper => "salt_pepper",
            OpName::Solarize => "solarize",
            OpName::JpegCompression => "jpeg_compression",
            OpName::RandomScale => "random_scale",
            OpName::RandomFlip => "random_flip",
            OpName::RandomCrop => "random_crop",
            OpName::Normalization => "normalization",
        }
    }
}

/// Parameter ranges for the photometric ops. Intervals are closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub contrast_gamma: [f64; 2],
    pub contrast_linear: [f64; 2],
    pub brightness: [f64; 2],
    pub hue_shift: [f64; 2],
    pub saturation: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub dropout: [f64; 2],
    pub coarse_dropout_count: [usize; 2],
    /// Largest rectangle side as a fraction of the image side.
    pub coarse_dropout_size: f64,
    pub multiply: [f64; 2],
    pub salt_pepper: [f64; 2],
    pub solarize: [f64; 2],
    pub jpeg_quality: [f64; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            contrast_gamma: [0.5, 2.0],
            contrast_linear: [0.5, 1.5],
            brightness: [-0.25, 0.25],
            hue_shift: [-0.1, 0.1],
            saturation: [0.5, 1.5],
            blur_sigma: [0.5, 2.0],
            noise_sigma: [0.01, 0.1],
            dropout: [0.01, 0.1],
            coarse_dropout_count: [1, 8],
            coarse_dropout_size: 0.2,
            multiply: [0.7, 1.3],
            salt_pepper: [0.005, 0.03],
            solarize: [0.4, 0.8],
            jpeg_quality: [30.0, 90.0],
        }
    }
}

/// The `[augment]` config table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub n_ops: usize,
    pub crop_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Pad undersized images before cropping; otherwise undersized is an error.
    pub pad: bool,
    /// The `[augment.ranges]` sub-table.
    pub ranges: AugmentRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_ops: 2,
            crop_size: 64,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            pad: true,
            ranges: AugmentRanges::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ops == 0 || self.n_ops > PHOTOMETRIC_POOL.len() {
            return Err(Error::Config(format!(
                "augment.n_ops must lie in 1..={}, got {}",
                PHOTOMETRIC_POOL.len(),
                self.n_ops
            )));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "augment.crop_size must be a positive multiple of 4, got {}",
                self.crop_size
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config("augment.scale_min/scale_max must satisfy 0 < min ≤ max".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augment.flip_prob must lie in [0, 1]".into()));
        }
        let r = &self.ranges;
        for (name, [lo, hi]) in [
            ("contrast_gamma", r.contrast_gamma),
            ("contrast_linear", r.contrast_linear),
            ("brightness", r.brightness),
            ("hue_shift", r.hue_shift),
            ("saturation", r.saturation),
            ("blur_sigma", r.blur_sigma),
            ("noise_sigma", r.noise_sigma),
            ("dropout", r.dropout),
            ("multiply", r.multiply),
            ("salt_pepper", r.salt_pepper),
            ("solarize", r.solarize),
            ("jpeg_quality", r.jpeg_quality),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("augment.{name} must be [lo, hi] with lo ≤ hi")));
            }
        }
        if r.contrast_gamma[0] <= 0.0 || r.blur_sigma[0] <= 0.0 || r.noise_sigma[0] <= 0.0 {
            return Err(Error::Config(
                "augment.contrast_gamma, blur_sigma and noise_sigma must be positive".into(),
            ));
        }
        if !(1.0..=100.0).contains(&r.jpeg_quality[0]) || r.jpeg_quality[1] > 100.0 {
            return Err(Error::Config("augment.jpeg_quality must lie in [1, 100]".into()));
        }
        if r.coarse_dropout_count[0] == 0 || r.coarse_dropout_count[0] > r.coarse_dropout_count[1] {
            return Err(Error::Config("augment.coarse_dropout_count must be [lo, hi] with 1 ≤ lo ≤ hi".into()));
        }
        if !(r.coarse_dropout_size > 0.0 && r.coarse_dropout_size <= 1.0) {
            return Err(Error::Config("augment.coarse_dropout_size must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `n_ops` photometric ops drawn uniformly with replacement, then the basic transforms.
pub fn sample_policy(n_ops: usize, rng: &mut impl Rng) -> Result<Vec<OpName>> {
    if n_ops == 0 || n_ops > PHOTOMETRIC_POOL.len() {
        return Err(Error::Config(format!(
            "n_ops must lie in 1..={}, got {n_ops}",
            PHOTOMETRIC_POOL.len()
        )));
    }
    let mut ops: Vec<OpName> = (0..n_ops)
        .map(|_| PHOTOMETRIC_POOL[rng.gen_range(0..PHOTOMETRIC_POOL.len())])
        .collect();
    ops.extend(BASIC_TRANSFORMS);
    Ok(ops)
}

/// A normalized, cropped training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: FloatImage,
    pub labels: LabelMap,
}

/// Runs the photometric part of `policy` on the image, then the geometric
/// part jointly on image and labels, then mean subtraction.
pub fn apply_strong(
    image: &FloatImage,
    labels: &LabelMap,
    policy: &[OpName],
    cfg: &AugmentConfig,
    mean: [f64; 3],
    rng: &mut impl Rng,
) -> Result<Augmented> {
    let mut img = image.clone();
    for &op in policy.iter().filter(|op| op.kind() == OpKind::Photometric) {
        Distortion::sample(op, &cfg.ranges, img.width, img.height, rng).apply(&mut img);
    }
    let with_basic = BASIC_TRANSFORMS.iter().all(|b| policy.contains(b));
    if !with_basic {
        let mut out = Augmented { image: img, labels: labels.clone() };
        out.image.subtract_mean(mean);
        return Ok(out);
    }
    apply_weak(&img, labels, cfg, mean, rng)
}

/// Random scale, random horizontal flip, random crop and mean subtraction.
pub fn apply_weak(
    image: &FloatImage,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    mean: [f64; 3],
    rng: &mut impl Rng,
) -> Result<Augmented> {
    let t = GeometricTransform::sample(image.width, image.height, cfg, rng)?;
    apply_geometric(image, labels, &t, cfg, mean)
}
