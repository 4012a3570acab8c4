use crate::augment::{stack_planar, FloatImage};
use crate::datahub::LoadedSample;
use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::model::MicroSegNet;
use crate::pseudolabel::harden;

/// Pixel counts with ground truth on rows and prediction on columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        ConfusionMatrix {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Accumulates one label/prediction pair; ground-truth ignore pixels are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "{} ground-truth pixels but {} predicted",
                gt.len(),
                pred.len()
            )));
        }
        for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
            if g == IGNORE_INDEX {
                continue;
            }
            for v in [g, p] {
                if v as usize >= self.classes {
                    return Err(Error::LabelDomain {
                        value: v,
                        index: i,
                        classes: self.classes,
                    });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union; 0 when there are none.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Single-scale, unflipped, eval-mode prediction for a batch of equally sized samples.
pub fn predict_labels(net: &MicroSegNet, samples: &[&LoadedSample], mean: [f64; 3]) -> Result<Vec<Vec<u8>>> {
    let imgs: Vec<FloatImage> = samples
        .iter()
        .map(|s| {
            let mut f = FloatImage::from_image(&s.image);
            f.subtract_mean(mean);
            f
        })
        .collect();
    let refs: Vec<&FloatImage> = imgs.iter().collect();
    let logits = net.predict(&stack_planar(&refs)?)?;
    let (n, c, h, w) = logits.dims4("logits")?;
    let per = c * h * w;
    Ok((0..n)
        .map(|k| harden(&logits.data()[k * per..(k + 1) * per], c, h * w))
        .collect())
}

/// mIoU of `net` on samples carrying ground truth. Never mutates the network.
pub fn evaluate(net: &MicroSegNet, samples: &[LoadedSample], mean: [f64; 3], batch: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(net.classes);
    let mut start = 0;
    while start < samples.len() {
        let first = &samples[start].image;
        let mut end = start + 1;
        while end < samples.len()
            && end - start < batch.max(1)
            && (samples[end].image.width, samples[end].image.height) == (first.width, first.height)
        {
            end += 1;
        }
        let chunk: Vec<&LoadedSample> = samples[start..end].iter().collect();
        let preds = predict_labels(net, &chunk, mean)?;
        for (s, p) in chunk.iter().zip(&preds) {
            let gt = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config(format!("evaluation sample `{}` has no ground truth", s.id)))?;
            cm.add(&gt.data, p)?;
        }
        start = end;
    }
    Ok(EvalReport {
        miou: cm.miou(),
        per_class: cm.iou(),
        confusion: cm,
    })
}
