use rand::Rng;

use super::{AugmentConfig, Augmented, FloatImage};
use crate::datahub::LabelMap;
use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::numerics::resize_planes;

/// One draw of the basic geometric pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop window in the scaled (and padded) frame.
    pub crop_x: usize,
    pub crop_y: usize,
}

pub(crate) fn scaled_extent(extent: usize, scale: f64) -> usize {
    ((extent as f64 * scale).round() as usize).max(1)
}

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            scale: 1.0,
            flip: false,
            crop_x: 0,
            crop_y: 0,
        }
    }

    pub fn sample(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Self> {
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let (sw, sh) = (scaled_extent(width, scale), scaled_extent(height, scale));
        let (pw, ph) = padded(sw, sh, cfg)?;
        let crop_x = rng.gen_range(0..=pw - cfg.crop_size);
        let crop_y = rng.gen_range(0..=ph - cfg.crop_size);
        Ok(GeometricTransform {
            scale,
            flip,
            crop_x,
            crop_y,
        })
    }
}

fn padded(sw: usize, sh: usize, cfg: &AugmentConfig) -> Result<(usize, usize)> {
    if (sw < cfg.crop_size || sh < cfg.crop_size) && !cfg.pad {
        return Err(Error::Geometry(format!(
            "crop {0}x{0} exceeds the {sw}x{sh} scaled image and padding is disabled",
            cfg.crop_size
        )));
    }
    Ok((sw.max(cfg.crop_size), sh.max(cfg.crop_size)))
}

/// Bilinear (align-corners false) resize of an interleaved RGB image.
pub fn resize_image(img: &FloatImage, width: usize, height: usize) -> FloatImage {
    if (width, height) == (img.width, img.height) {
        return img.clone();
    }
    let planar = img.to_planar();
    let out = resize_planes(&planar, 3, img.height, img.width, height, width);
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[i * 3 + ch] = out[ch * plane + i];
        }
    }
    FloatImage { width, height, data }
}

/// Nearest-neighbor resize: output pixel `o` reads source `floor((o + ½)·src/dst)`,
/// the source pixel whose center is closest to the bilinear sampling point.
pub fn resize_labels_nearest(labels: &LabelMap, width: usize, height: usize) -> LabelMap {
    let pick = |o: usize, src: usize, dst: usize| {
        (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
    };
    let xs: Vec<usize> = (0..width).map(|x| pick(x, labels.width, width)).collect();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = pick(y, labels.height, height);
        data.extend(xs.iter().map(|&sx| labels.data[sy * labels.width + sx]));
    }
    LabelMap { width, height, data }
}

/// Mirrors columns in place. `stride` is 3 for RGB, 1 for labels.
pub fn flip_horizontal<T: Copy>(data: &mut [T], width: usize, height: usize, stride: usize) {
    for y in 0..height {
        let row = &mut data[y * width * stride..(y + 1) * width * stride];
        for x in 0..width / 2 {
            let (a, b) = (x * stride, (width - 1 - x) * stride);
            for k in 0..stride {
                row.swap(a + k, b + k);
            }
        }
    }
}

/// Scale, flip, pad (image with `mean`, labels with the ignore index), crop,
/// then subtract `mean`.
pub fn apply_geometric(
    image: &FloatImage,
    labels: &LabelMap,
    t: &GeometricTransform,
    cfg: &AugmentConfig,
    mean: [f64; 3],
) -> Result<Augmented> {
    if (labels.width, labels.height) != (image.width, image.height) {
        return Err(Error::Dimension(format!(
            "label map is {}x{} but image is {}x{}",
            labels.width, labels.height, image.width, image.height
        )));
    }
    let (sw, sh) = (scaled_extent(image.width, t.scale), scaled_extent(image.height, t.scale));
    let mut img = resize_image(image, sw, sh);
    let mut lab = resize_labels_nearest(labels, sw, sh);
    if t.flip {
        flip_horizontal(&mut img.data, sw, sh, 3);
        flip_horizontal(&mut lab.data, sw, sh, 1);
    }
    let (pw, ph) = padded(sw, sh, cfg)?;
    let c = cfg.crop_size;
    if t.crop_x + c > pw || t.crop_y + c > ph {
        return Err(Error::Geometry(format!(
            "crop window at ({}, {}) of size {c} leaves the {pw}x{ph} frame",
            t.crop_x, t.crop_y
        )));
    }
    let mut out_img = Vec::with_capacity(c * c * 3);
    let mut out_lab = Vec::with_capacity(c * c);
    for y in t.crop_y..t.crop_y + c {
        for x in t.crop_x..t.crop_x + c {
            if x < sw && y < sh {
                let i = y * sw + x;
                out_img.extend_from_slice(&img.data[i * 3..i * 3 + 3]);
                out_lab.push(lab.data[i]);
            } else {
                out_img.extend_from_slice(&mean);
                out_lab.push(IGNORE_INDEX);
            }
        }
    }
    let mut image = FloatImage::new(c, c, out_img)?;
    image.subtract_mean(mean);
    Ok(Augmented {
        image,
        labels: LabelMap {
            width: c,
            height: c,
            data: out_lab,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_halving_picks_odd_pixels() {
        let l = LabelMap {
            width: 4,
            height: 1,
            data: vec![0, 1, 2, 3],
        };
        assert_eq!(resize_labels_nearest(&l, 2, 1).data, vec![1, 3]);
    }

    #[test]
    fn flip_is_involution() {
        let mut d: Vec<u8> = (0..15).collect();
        flip_horizontal(&mut d, 5, 3, 1);
        assert_eq!(&d[..5], &[4, 3, 2, 1, 0]);
        flip_horizontal(&mut d, 5, 3, 1);
        assert_eq!(d, (0..15).collect::<Vec<u8>>());
    }

    #[test]
    fn pad_region_is_ignore_and_zero_after_normalization() {
        let cfg = AugmentConfig {
            crop_size: 8,
            ..Default::default()
        };
        let img = FloatImage::new(4, 4, vec![0.9; 48]).unwrap();
        let lab = LabelMap {
            width: 4,
            height: 4,
            data: vec![1; 16],
        };
        let mean = [0.3, 0.4, 0.5];
        let out = apply_geometric(&img, &lab, &GeometricTransform::identity(), &cfg, mean).unwrap();
        assert_eq!(out.labels.data[7], IGNORE_INDEX);
        assert_eq!(out.labels.data[0], 1);
        assert!(out.image.data[21..24].iter().all(|&v| v == 0.0));
        let no_pad = AugmentConfig { pad: false, ..cfg };
        assert!(matches!(
            apply_geometric(&img, &lab, &GeometricTransform::identity(), &no_pad, mean),
            Err(Error::Geometry(_))
        ));
    }
}
