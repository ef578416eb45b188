//! Confusion matrices, per-class IoU, mIoU and pixel accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, IGNORE};

/// `(L+1)×(L+1)` counts, rows = reference class, columns = prediction.
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

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Add one image. Reference IGNORE pixels are skipped; so are predicted IGNORE
    /// pixels when `skip_unlabeled` is set, otherwise they are an error.
    pub fn accumulate(&mut self, pred: &LabelMap, reference: &LabelMap, skip_unlabeled: bool) -> Result<()> {
        if !pred.same_shape(reference) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.height(),
                pred.width(),
                reference.height(),
                reference.width()
            )));
        }
        for (i, (&p, &r)) in pred.data().iter().zip(reference.data()).enumerate() {
            if r == IGNORE {
                continue;
            }
            if p == IGNORE {
                if skip_unlabeled {
                    continue;
                }
                return Err(Error::Invalid(format!("IGNORE in prediction at pixel {i}")));
            }
            let (p, r) = (usize::from(p), usize::from(r));
            if p >= self.classes || r >= self.classes {
                return Err(Error::LabelOutOfRange {
                    offset: i as u64,
                    value: p.max(r) as u8,
                    max: (self.classes - 1) as u8,
                });
            }
            self.counts[r * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both maps) and their mean.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|r| self.get(r, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("every class has an empty union".into()));
        }
        Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }

    pub fn report(&self) -> Result<EvalReport> {
        let (miou, per_class_iou) = self.miou()?;
        Ok(EvalReport {
            per_class_iou,
            miou,
            pixel_acc: self.pixel_accuracy().unwrap_or(0.0),
            pixels: self.total(),
        })
    }
}

/// One image's confusion matrix over `num_classes + 1` labels.
pub fn confusion(pred: &LabelMap, reference: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes + 1);
    cm.accumulate(pred, reference, false)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    pub pixels: u64,
}

/// Mean IoU of one prediction against a reference.
pub fn miou(pred: &LabelMap, reference: &LabelMap, num_classes: usize) -> Result<f64> {
    Ok(confusion(pred, reference, num_classes)?.miou()?.0)
}
