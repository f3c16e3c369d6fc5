//! Confusion-matrix accumulation and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMask;

/// Accumulated confusion counts. Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricReport {
    num_classes: usize,
    confusion: Vec<u64>,
    evaluated_pixels: u64,
}

/// Per-class IoU (absent for classes never seen in gt nor prediction) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl MetricReport {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
            evaluated_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn evaluated_pixels(&self) -> u64 {
        self.evaluated_pixels
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.num_classes + pred]
    }

    /// Confusion matrix as rows.
    pub fn confusion(&self) -> Vec<Vec<u64>> {
        self.confusion
            .chunks(self.num_classes.max(1))
            .map(|r| r.to_vec())
            .collect()
    }

    /// Adds one image. Pixels whose ground truth is the ignore index are skipped.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::invalid(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let c = self.num_classes;
        let mut local = vec![0u64; c * c];
        let mut evaluated = 0u64;
        for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
            if p as usize >= c {
                let (row, col) = (i / pred.width(), i % pred.width());
                return Err(Error::invalid(format!(
                    "prediction value {p} at (row {row}, col {col}) is not a committed class"
                )));
            }
            if g == gt.ignore_index() {
                continue;
            }
            if g as usize >= c {
                return Err(Error::invalid(format!(
                    "ground truth class {g} outside [0, {c})"
                )));
            }
            local[g as usize * c + p as usize] += 1;
            evaluated += 1;
        }
        for (dst, src) in self.confusion.iter_mut().zip(local) {
            *dst += src;
        }
        self.evaluated_pixels += evaluated;
        Ok(())
    }

    pub(crate) fn record(&mut self, gt: usize, pred: usize) {
        self.confusion[gt * self.num_classes + pred] += 1;
        self.evaluated_pixels += 1;
    }

    /// Moves one pixel's prediction from `old` to `new` for ground truth `gt`.
    /// Used for incremental bookkeeping while a prediction is being edited.
    pub(crate) fn reassign(&mut self, gt: usize, old: usize, new: usize) {
        let c = self.num_classes;
        self.confusion[gt * c + old] -= 1;
        self.confusion[gt * c + new] += 1;
    }

    pub fn merge(&mut self, other: &MetricReport) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid("cannot merge reports with different class counts"));
        }
        for (dst, &src) in self.confusion.iter_mut().zip(&other.confusion) {
            *dst += src;
        }
        self.evaluated_pixels += other.evaluated_pixels;
        Ok(())
    }

    /// IoU_c = TP / (TP + FP + FN); classes with a zero denominator are left
    /// out of the mean.
    pub fn miou(&self) -> Result<IouSummary> {
        if self.evaluated_pixels == 0 {
            return Err(Error::UndefinedMetric);
        }
        let c = self.num_classes;
        let mut per_class_iou = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.count(k, k);
            let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
            let union = row + col - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouSummary {
            per_class_iou,
            miou,
        })
    }
}
