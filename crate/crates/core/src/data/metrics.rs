use serde::Serialize;

use crate::data::scene::LabelMap;
use crate::error::{Error, Result};
use crate::model::IGNORE_INDEX;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `counts[g][p] += 1` for every pixel whose ground truth is not ignored.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("confusion update", &[pred.len()], &[gt.len()]));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().find(|&&p| p as usize >= k) {
            return Err(Error::InvalidLabel {
                value: bad,
                num_classes: k,
            });
        }
        if let Some(&bad) = gt.iter().find(|&&g| g != IGNORE_INDEX && g as usize >= k) {
            return Err(Error::InvalidLabel {
                value: bad,
                num_classes: k,
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_INDEX {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim(
                "confusion merge",
                &[self.num_classes],
                &[other.num_classes],
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn cm_update(
    mut cm: ConfusionMatrix,
    pred: &LabelMap,
    gt: &LabelMap,
) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(
            "cm_update",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    cm.update(&pred.data, &gt.data)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where the class never occurs in ground truth or prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `IoU_c = TP / (TP + FP + FN)`; classes with a zero denominator are left out of the mean.
pub fn iou_from_cm(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let den = row + col - tp;
            (den > 0).then(|| tp as f64 / den as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyMetrics(
            "every class has a zero IoU denominator",
        ));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Pixel frequency of each class, ignoring 255.
pub fn class_frequencies<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    num_classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for &v in &l.data {
            if v == IGNORE_INDEX {
                continue;
            }
            let slot = counts.get_mut(v as usize).ok_or(Error::InvalidLabel {
                value: v,
                num_classes,
            })?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyMetrics("no labelled pixels"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `w_c = 1 / ln(1.02 + p_c)`.
pub fn class_weights(freqs: &[f64]) -> Vec<f64> {
    freqs.iter().map(|&p| 1.0 / (1.02 + p).ln()).collect()
}
