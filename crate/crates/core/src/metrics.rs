//! Segmentation evaluation: confusion matrices, per-class IoU, mean IoU split
//! over shared (closed-set) and private (open-set) classes, pixel accuracy.
//!
//! Classes absent from both prediction and ground truth have an undefined IoU;
//! they are flagged and excluded from means rather than counted as zero. All
//! means come from the aggregate confusion matrix over the whole evaluation
//! set, not from per-image averaging.

use crate::error::{Error, Result};
use crate::maps::{LabelMap, IGNORE_LABEL};

/// Pixel counts; entry `(g, p)` counts pixels with ground truth `g` predicted
/// as `p`. Accumulation is associative, so partial matrices merge by addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one image's pixels. Ground-truth pixels labeled 255 are excluded.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch {
                left: vec![pred.height(), pred.width()],
                right: vec![gt.height(), gt.width()],
            });
        }
        for row in 0..gt.height() {
            for col in 0..gt.width() {
                let g = gt.get(row, col);
                if g == IGNORE_LABEL {
                    continue;
                }
                let p = pred.get(row, col);
                let (g, p) = (g as usize, p as usize);
                if g >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: g,
                        limit: self.num_classes,
                        row,
                        col,
                    });
                }
                if p >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: p,
                        limit: self.num_classes,
                        row,
                        col,
                    });
                }
                self.counts[g * self.num_classes + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch {
                left: vec![self.num_classes],
                right: vec![other.num_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Confusion matrix for one prediction / ground-truth pair.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.accumulate(pred, gt)?;
    Ok(m)
}

/// Evaluation summary. IoUs are fractions in `[0, 1]`; the CLI formats them
/// as percentages.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Per-class IoU; `None` flags classes absent from both prediction and
    /// ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over defined shared classes.
    pub miou_shared: Option<f64>,
    /// Mean IoU over defined private (open-set) classes.
    pub miou_private: Option<f64>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub shared: Vec<usize>,
    pub private: Vec<usize>,
}

/// Per-class IoU and the shared/private mean split.
/// `shared` and `private` must be disjoint and cover every class id.
pub fn iou_report(
    m: &ConfusionMatrix,
    shared: &[usize],
    private: &[usize],
) -> Result<EvalReport> {
    if m.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let n = m.num_classes();
    let mut covered = vec![false; n];
    for &c in shared.iter().chain(private) {
        if c >= n || covered[c] {
            return Err(Error::InvalidConfig(format!(
                "shared/private sets must disjointly cover classes < {n}; class {c} repeated or out of range"
            )));
        }
        covered[c] = true;
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::InvalidConfig(
            "shared/private sets must cover every class".into(),
        ));
    }

    let per_class_iou: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let inter = m.get(c, c);
            let union = m.row_sum(c) + m.col_sum(c) - inter;
            if union == 0 {
                None
            } else {
                Some(inter as f64 / union as f64)
            }
        })
        .collect();

    let mean_over = |classes: &[usize]| -> Option<f64> {
        let defined: Vec<f64> = classes
            .iter()
            .filter_map(|&c| per_class_iou[c])
            .collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };

    Ok(EvalReport {
        miou_shared: mean_over(shared),
        miou_private: mean_over(private),
        accuracy: m.trace() as f64 / m.total() as f64,
        per_class_iou,
        confusion: m.clone(),
        shared: shared.to_vec(),
        private: private.to_vec(),
    })
}
