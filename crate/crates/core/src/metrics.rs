//! Confusion matrices, IoU and pixel accuracy.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion", "matrix must be square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Counts every non-ignored pixel of `truth` against `pred`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::shape(
                "prediction",
                &[truth.height, truth.width],
                &[pred.height, pred.width],
            ));
        }
        let c = self.classes;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::invalid(
                    "labels",
                    alloc::format!("class index {} outside 0..{c}", t.max(p)),
                ));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean IoU over the classes that occur, plus per-class values.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let per = cm.per_class_iou();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("confusion", "no class occurs"));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

pub fn pixel_acc(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion", "matrix is empty"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Per-pixel argmax of a `[H, W, C]` probability map (first maximum wins).
pub fn argmax(probs: &Tensor) -> Result<LabelMap> {
    let (h, w, c) = probs.hwc()?;
    if c > 255 {
        return Err(Error::invalid("num_classes", "at most 255 classes"));
    }
    let data = probs
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub pixel_acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let (m, per) = miou(&cm)?;
        Ok(Self {
            miou: m,
            pixel_acc: pixel_acc(&cm)?,
            per_class_iou: per,
            confusion: cm,
        })
    }
}
