//! Segmentation scores: accuracy, per-class IoU, mean IoU, and accuracy
//! restricted to certain predictions.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: alloc::vec![0; classes * classes],
        }
    }

    pub fn from_labels(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut cm = Self::new(classes);
        cm.add_all(truth, pred)?;
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion matrix", &[truth.len()], &[pred.len()]));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    /// Elementwise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
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

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn truth_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    fn pred_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::Empty("confusion matrix")),
        n => Ok(cm.correct() as f64 / n as f64),
    }
}

/// Intersection over union of class `i`; `None` if the class is absent from
/// both truth and prediction.
pub fn class_iou(cm: &ConfusionMatrix, i: usize) -> Option<f64> {
    let tp = cm.get(i, i);
    let union = cm.truth_count(i) + cm.pred_count(i) - tp;
    (union > 0).then(|| tp as f64 / union as f64)
}

/// Mean of the defined class IoUs; `None` when no class is defined.
pub fn mean_iou(cm: &ConfusionMatrix) -> Option<f64> {
    let defined: Vec<f64> = (0..cm.classes).filter_map(|i| class_iou(cm, i)).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Filtered {
    /// Accuracy over certain points; `None` when every point was dropped.
    pub accuracy: Option<f64>,
    pub drop_rate: f64,
}

pub fn filtered_metrics(truth: &[usize], pred: &[usize], certain: &[bool]) -> Result<Filtered> {
    if truth.len() != pred.len() || truth.len() != certain.len() {
        return Err(Error::shape(
            "filtered metrics",
            &[truth.len(), pred.len()],
            &[certain.len()],
        ));
    }
    if truth.is_empty() {
        return Err(Error::Empty("filtered metrics"));
    }
    let (mut kept, mut right) = (0usize, 0usize);
    for ((t, p), &c) in truth.iter().zip(pred).zip(certain) {
        if c {
            kept += 1;
            right += usize::from(t == p);
        }
    }
    Ok(Filtered {
        accuracy: (kept > 0).then(|| right as f64 / kept as f64),
        drop_rate: (truth.len() - kept) as f64 / truth.len() as f64,
    })
}
