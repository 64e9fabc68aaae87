//! Confusion matrices and mean intersection-over-union.

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};

/// Rows are reference classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    /// Reference pixels whose prediction was IGNORE (unrestricted mode only).
    unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            unassigned: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
    }

    fn accumulate(&mut self, pred: &LabelMap, reference: &LabelMap, restrict: bool) -> Result<()> {
        if !pred.same_shape(reference) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.height(),
                pred.width(),
                reference.height(),
                reference.width()
            )));
        }
        pred.validate(self.num_classes)?;
        reference.validate(self.num_classes)?;
        for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
            if r == IGNORE {
                continue;
            }
            if p == IGNORE {
                if !restrict {
                    self.unassigned[r as usize] += 1;
                }
                continue;
            }
            self.counts[r as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }
}

fn build(pred: &[LabelMap], reference: &[LabelMap], num_classes: usize, restrict: bool) -> Result<ConfusionMatrix> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, r) in pred.iter().zip(reference) {
        cm.accumulate(p, r, restrict)?;
    }
    Ok(cm)
}

/// Counts over all reference-labeled pixels. A predicted IGNORE counts as a
/// miss for its reference class.
pub fn confusion_matrix(pred: &[LabelMap], reference: &[LabelMap], num_classes: usize) -> Result<ConfusionMatrix> {
    build(pred, reference, num_classes, false)
}

/// Counts only pixels the prediction labeled (pseudo-label quality).
pub fn confusion_matrix_restricted(
    pred: &[LabelMap],
    reference: &[LabelMap],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    build(pred, reference, num_classes, true)
}

/// Mean IoU over classes present in prediction or reference, with per-class
/// IoU (`None` for absent classes). An empty matrix scores 0.
pub fn miou(cm: &ConfusionMatrix) -> (f64, Vec<Option<f64>>) {
    let n = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..n).map(|p| cm.get(c, p)).sum::<u64>() + cm.unassigned[c];
            let col: u64 = (0..n).map(|r| cm.get(r, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (mean, per_class)
}
