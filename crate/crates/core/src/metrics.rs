//! Segmentation quality metrics: confusion matrices and mean IoU.

use crate::error::{Error, Result};
use crate::losses::LabelMap;

/// `C×C` pixel counts; entry `(i, j)` counts pixels with ground truth `i`
/// predicted as `j`. Ignored pixels are excluded. Matrices over disjoint
/// pixel sets merge by addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn record(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.num_classes + pred] += 1;
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, &b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// Accumulate one prediction/ground-truth pair of label maps.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape(
                "confusion_matrix",
                format!("pred {}x{} vs gt {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
            if g == ignore {
                continue;
            }
            if (g as usize) >= self.num_classes || (p as usize) >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label out of range: gt {g} pred {p} with {} classes",
                    self.num_classes
                )));
            }
            self.record(g as usize, p as usize);
        }
        Ok(())
    }

    /// Per-class IoU, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fp: u64 = (0..c).map(|i| self.count(i, k)).sum::<u64>() - tp;
                let fn_: u64 = (0..c).map(|j| self.count(k, j)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU. Classes absent from both maps are excluded from the mean
    /// by default (VOC convention); with `include_absent` they enter the
    /// average as 0 (strict averaging over all C classes).
    pub fn miou(&self, include_absent: bool) -> f64 {
        let ious = self.per_class_iou();
        if include_absent {
            let sum: f64 = ious.iter().map(|i| i.unwrap_or(0.0)).sum();
            sum / self.num_classes as f64
        } else {
            let present: Vec<f64> = ious.iter().filter_map(|&i| i).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        }
    }
}

/// Convenience wrapper: confusion matrix + mIoU of a single pair.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u8) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok((cm.per_class_iou(), cm.miou(false)))
}
