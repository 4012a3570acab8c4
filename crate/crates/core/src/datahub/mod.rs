//! Synthetic data, labeled/unlabeled splits and on-disk formats.

mod manifest;
mod pnm;
mod synth;

pub use manifest::{read_mean, write_mean, Manifest, Provenance, Sample, Split};
pub use pnm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image, read_labels, write_image, write_labels, Image,
    LabelMap,
};
pub use synth::{channel_mean, generate_dataset, render_sample, Geometry, PlacedShape, RenderedSample, SyntheticSpec};

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Partitions the training rows of `manifest` into labeled and unlabeled sets.
///
/// `round(fraction · n)` rows are drawn uniformly without replacement; the
/// rest keep their image but have their label withheld. Both sets preserve
/// manifest order.
pub fn split(manifest: &Manifest, labeled_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    let train: Vec<&Sample> = manifest.train().collect();
    let k = (labeled_fraction * train.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} of {} training images selects none",
            train.len()
        )));
    }
    let mut rng = rng_for(&[seed, 0x5b1e]);
    let mut chosen = vec![false; train.len()];
    for i in sample_indices(&mut rng, train.len(), k) {
        chosen[i] = true;
    }
    let mut labeled = Vec::with_capacity(k);
    let mut unlabeled = Vec::with_capacity(train.len() - k);
    for (s, pick) in train.into_iter().zip(chosen) {
        if pick {
            labeled.push(Sample {
                split: Split::TrainLabeled,
                ..s.clone()
            });
        } else {
            unlabeled.push(Sample {
                label: None,
                provenance: Provenance::None,
                split: Split::TrainUnlabeled,
                ..s.clone()
            });
        }
    }
    Ok((labeled, unlabeled))
}

/// A sample with its pixels in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: Image,
    pub labels: Option<LabelMap>,
}

pub fn load_samples(samples: &[Sample], classes: usize) -> Result<Vec<LoadedSample>> {
    samples
        .iter()
        .map(|s| {
            let image = read_image(&s.image)?;
            let labels = s.label.as_deref().map(|p| read_labels(p, classes)).transpose()?;
            if let Some(l) = &labels {
                if (l.width, l.height) != (image.width, image.height) {
                    return Err(Error::format(
                        s.label.as_deref().unwrap_or(&s.image),
                        0,
                        format!(
                            "label map is {}x{} but image is {}x{}",
                            l.width, l.height, image.width, image.height
                        ),
                    ));
                }
            }
            Ok(LoadedSample {
                id: s.id.clone(),
                image,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| Sample {
                    id: format!("s{i}"),
                    image: PathBuf::from(format!("i{i}.ppm")),
                    label: Some(PathBuf::from(format!("l{i}.pgm"))),
                    provenance: Provenance::GroundTruth,
                    split: if i % 10 == 9 { Split::Val } else { Split::TrainLabeled },
                })
                .collect(),
        )
    }

    #[test]
    fn eighth_of_full_training_set() {
        let m = Manifest::new(
            (0..2975)
                .map(|i| Sample {
                    id: i.to_string(),
                    image: PathBuf::from("x"),
                    label: Some(PathBuf::from("y")),
                    provenance: Provenance::GroundTruth,
                    split: Split::TrainLabeled,
                })
                .collect(),
        );
        let (l, u) = split(&m, 1.0 / 8.0, 1).unwrap();
        assert_eq!((l.len(), u.len()), (372, 2603));
    }

    #[test]
    fn full_fraction_leaves_nothing_unlabeled() {
        let (l, u) = split(&manifest(40), 1.0, 3).unwrap();
        assert_eq!(l.len(), 36);
        assert!(u.is_empty());
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let m = manifest(50);
        let (l, u) = split(&m, 0.25, 9).unwrap();
        let mut ids: Vec<&str> = l.iter().chain(&u).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = m.train().map(|s| s.id.as_str()).collect();
        want.sort();
        assert_eq!(ids, want);
        assert!(u.iter().all(|s| s.label.is_none() && s.provenance == Provenance::None));
        assert_eq!(split(&m, 0.25, 9).unwrap(), (l, u));
    }

    #[test]
    fn zero_labeled_is_config_error() {
        assert!(matches!(split(&manifest(10), 0.01, 0), Err(Error::Config(_))));
        assert!(matches!(split(&manifest(10), 0.0, 0), Err(Error::Config(_))));
    }
}
