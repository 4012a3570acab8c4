//! Color-only distortions. None of these read or write label maps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{AugmentRanges, FloatImage, OpName};

/// A photometric op with its parameters drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Distortion {
    ContrastGamma { gamma: f64 },
    ContrastLinear { alpha: f64 },
    Brightness { delta: f64 },
    BrightnessChannel { channel: usize, delta: f64 },
    Equalize,
    Hsv { hue_shift: f64, saturation: f64 },
    InvertChannel { channel: usize },
    Blur { sigma: f64 },
    NoiseGaussian { sigma: f64, seed: u64 },
    NoisePoisson { seed: u64 },
    ChannelShuffle { order: [usize; 3] },
    Dropout { p: f64, seed: u64 },
    CoarseDropout { rects: Vec<[usize; 4]> },
    Multiply { factor: f64 },
    SaltPepper { p: f64, seed: u64 },
    Solarize { threshold: f64 },
    JpegCompression { quality: u8 },
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl Distortion {
    /// Draws parameters for `op` from `ranges`. Panics for geometric ops.
    pub fn sample(op: OpName, ranges: &AugmentRanges, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        match op {
            OpName::ContrastGamma => Distortion::ContrastGamma { gamma: draw(rng, ranges.contrast_gamma) },
            OpName::ContrastLinear => Distortion::ContrastLinear { alpha: draw(rng, ranges.contrast_linear) },
            OpName::Brightness => Distortion::Brightness { delta: draw(rng, ranges.brightness) },
            OpName::BrightnessChannel => Distortion::BrightnessChannel {
                channel: rng.gen_range(0..3),
                delta: draw(rng, ranges.brightness),
            },
            OpName::Equalize => Distortion::Equalize,
            OpName::Hsv => Distortion::Hsv {
                hue_shift: draw(rng, ranges.hue_shift),
                saturation: draw(rng, ranges.saturation),
            },
            OpName::InvertChannel => Distortion::InvertChannel { channel: rng.gen_range(0..3) },
            OpName::Blur => Distortion::Blur { sigma: draw(rng, ranges.blur_sigma) },
            OpName::NoiseGaussian => Distortion::NoiseGaussian {
                sigma: draw(rng, ranges.noise_sigma),
                seed: rng.gen(),
            },
            OpName::NoisePoisson => Distortion::NoisePoisson { seed: rng.gen() },
            OpName::ChannelShuffle => {
                let mut order = [0, 1, 2];
                order.shuffle(rng);
                Distortion::ChannelShuffle { order }
            }
            OpName::Dropout => Distortion::Dropout {
                p: draw(rng, ranges.dropout),
                seed: rng.gen(),
            },
            OpName::CoarseDropout => {
                let [lo, hi] = ranges.coarse_dropout_count;
                let count = rng.gen_range(lo.max(1)..=hi.max(lo.max(1)));
                let max_w = ((width as f64 * ranges.coarse_dropout_size).floor() as usize).max(1);
                let max_h = ((height as f64 * ranges.coarse_dropout_size).floor() as usize).max(1);
                let rects = (0..count)
                    .map(|_| {
                        let w = rng.gen_range(1..=max_w);
                        let h = rng.gen_range(1..=max_h);
                        let x = rng.gen_range(0..=width.saturating_sub(w));
                        let y = rng.gen_range(0..=height.saturating_sub(h));
                        [x, y, w, h]
                    })
                    .collect();
                Distortion::CoarseDropout { rects }
            }
            OpName::Multiply => Distortion::Multiply { factor: draw(rng, ranges.multiply) },
            OpName::SaltPepper => Distortion::SaltPepper {
                p: draw(rng, ranges.salt_pepper),
                seed: rng.gen(),
            },
            OpName::Solarize => Distortion::Solarize { threshold: draw(rng, ranges.solarize) },
            OpName::JpegCompression => Distortion::JpegCompression {
                quality: draw(rng, ranges.jpeg_quality).round().clamp(1.0, 100.0) as u8,
            },
            OpName::RandomScale | OpName::RandomFlip | OpName::RandomCrop | OpName::Normalization => {
                panic!("{op:?} is not a photometric op")
            }
        }
    }

    /// Applies the distortion in place and clamps to [0,1].
    pub fn apply(&self, img: &mut FloatImage) {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let per_value = |img: &mut FloatImage, f: &dyn Fn(f64) -> f64| {
            img.data.iter_mut().for_each(|v| *v = f(*v));
        };
        match self {
            Distortion::ContrastGamma { gamma } => per_value(img, &|v| v.max(0.0).powf(*gamma)),
            Distortion::ContrastLinear { alpha } => per_value(img, &|v| (v - 0.5) * alpha + 0.5),
            Distortion::Brightness { delta } => per_value(img, &|v| v + delta),
            Distortion::BrightnessChannel { channel, delta } => {
                img.data.iter_mut().skip(*channel).step_by(3).for_each(|v| *v += delta)
            }
            Distortion::Equalize => equalize(img),
            Distortion::Hsv { hue_shift, saturation } => {
                for px in img.data.chunks_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let h = (h + hue_shift).rem_euclid(1.0);
                    let s = (s * saturation).clamp(0.0, 1.0);
                    let (r, g, b) = hsv_to_rgb(h, s, v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
            Distortion::InvertChannel { channel } => {
                img.data.iter_mut().skip(*channel).step_by(3).for_each(|v| *v = 1.0 - *v)
            }
            Distortion::Blur { sigma } => gaussian_blur(img, *sigma),
            Distortion::NoiseGaussian { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let normal = Normal::new(0.0, *sigma).expect("finite sigma");
                img.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            Distortion::NoisePoisson { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for v in img.data.iter_mut() {
                    let rate = v.clamp(0.0, 1.0) * 255.0;
                    *v = if rate > 0.0 {
                        Poisson::new(rate).expect("positive rate").sample(&mut rng) / 255.0
                    } else {
                        0.0
                    };
                }
            }
            Distortion::ChannelShuffle { order } => {
                for px in img.data.chunks_mut(3) {
                    let src = [px[0], px[1], px[2]];
                    for (dst, &o) in px.iter_mut().zip(order) {
                        *dst = src[o];
                    }
                }
            }
            Distortion::Dropout { p, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for px in img.data.chunks_mut(3) {
                    if rng.gen::<f64>() < *p {
                        px.fill(0.0);
                    }
                }
            }
            Distortion::CoarseDropout { rects } => {
                for &[x, y, w, h] in rects {
                    for yy in y..(y + h).min(img.height) {
                        for xx in x..(x + w).min(img.width) {
                            let i = (yy * img.width + xx) * 3;
                            img.data[i..i + 3].fill(0.0);
                        }
                    }
                }
            }
            Distortion::Multiply { factor } => per_value(img, &|v| v * factor),
            Distortion::SaltPepper { p, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for px in img.data.chunks_mut(3) {
                    if rng.gen::<f64>() < *p {
                        px.fill(if rng.gen::<bool>() { 1.0 } else { 0.0 });
                    }
                }
            }
            Distortion::Solarize { threshold } => {
                per_value(img, &|v| if v >= *threshold { 1.0 - v } else { v })
            }
            Distortion::JpegCompression { quality } => jpeg_round_trip(img, *quality),
        }
        img.clamp_unit();
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-channel histogram equalization on 8-bit levels.
fn equalize(img: &mut FloatImage) {
    let total = img.width * img.height;
    for ch in 0..3 {
        let mut hist = [0usize; 256];
        for v in img.data.iter().skip(ch).step_by(3) {
            hist[quantize(*v) as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (c, h) in cdf.iter_mut().zip(hist) {
            acc += h;
            *c = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if total <= cdf_min {
            continue;
        }
        let span = (total - cdf_min) as f64;
        for v in img.data.iter_mut().skip(ch).step_by(3) {
            let level = quantize(*v) as usize;
            *v = ((cdf[level] - cdf_min) as f64 / span * 255.0).round() / 255.0;
        }
    }
}

/// Hue, saturation and value, each in [0,1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + off).clamp(0, w - 1), y)
                        } else {
                            (x, (y + off).clamp(0, h - 1))
                        };
                        acc += kv * src[((sy * w + sx) * 3) as usize + ch];
                    }
                    out[((y * w + x) * 3) as usize + ch] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    img.data = pass(&tmp, false);
}

fn jpeg_round_trip(img: &mut FloatImage, quality: u8) {
    use image::codecs::jpeg::JpegEncoder;
    use image::{ExtendedColorType, ImageFormat};

    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let mut encoded = Vec::new();
    let ok = JpegEncoder::new_with_quality(&mut encoded, quality)
        .encode(&bytes, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .is_ok();
    if !ok {
        return;
    }
    if let Ok(decoded) = image::load_from_memory_with_format(&encoded, ImageFormat::Jpeg) {
        let rgb = decoded.to_rgb8();
        if rgb.width() as usize == img.width && rgb.height() as usize == img.height {
            for (v, &b) in img.data.iter_mut().zip(rgb.as_raw()) {
                *v = b as f64 / 255.0;
            }
        }
    }
}
