//! Confusion matrix and per-class Acc / IoU / F1.

use core::ops::Add;

use crate::error::{Error, Result};
use crate::tensor::Shape;
use crate::types::{LabelMap, NUM_CLASSES};

/// `counts[g][p]` = pixels of ground-truth class `g` predicted as `p`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::ShapeMismatch {
                context: "confusion matrix prediction",
                expected: Shape::new(1, 1, gt.height(), gt.width()),
                found: Shape::new(1, 1, pred.height(), pred.width()),
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&g| g != class).map(|g| self.counts[g][class]).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&p| p != class).map(|p| self.counts[class][p]).sum()
    }

    pub fn compute(&self) -> Result<MetricsReport> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let classes: [ClassMetrics; NUM_CLASSES] = core::array::from_fn(|c| {
            let (tp, fp, fn_) = (self.true_positives(c), self.false_positives(c), self.false_negatives(c));
            ClassMetrics {
                acc: ratio(tp, tp + fn_),
                iou: ratio(tp, tp + fp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
            }
        });
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
        Ok(MetricsReport {
            m_acc: mean(|c| c.acc),
            m_iou: mean(|c| c.iou),
            m_f1: mean(|c| c.f1),
            classes,
        })
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        self.merge(&rhs);
        self
    }
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassMetrics {
    pub acc: f64,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsReport {
    pub classes: [ClassMetrics; NUM_CLASSES],
    pub m_acc: f64,
    pub m_iou: f64,
    pub m_f1: f64,
}

impl MetricsReport {
    /// Column order: Acc, IoU, F1 for each class, then mAcc, mIoU, mF1.
    pub fn columns(&self) -> [f64; 3 * NUM_CLASSES + 3] {
        let mut out = [0.0; 3 * NUM_CLASSES + 3];
        for (c, m) in self.classes.iter().enumerate() {
            out[3 * c..3 * c + 3].copy_from_slice(&[m.acc, m.iou, m.f1]);
        }
        out[3 * NUM_CLASSES..].copy_from_slice(&[self.m_acc, self.m_iou, self.m_f1]);
        out
    }
}

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "drivable road", "negative obstacle"];
