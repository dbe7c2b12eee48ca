//! Per-pixel label maps and class probability maps.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixels carrying this label are excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel integer class labels, `h x w`. Labels are 8-bit so they round-trip
/// through the PGM dump format; 255 is the ignore marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: vec![height, width],
                right: vec![labels.len()],
            });
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of pixels whose label differs from `other`. Shapes must match.
    pub fn diff_fraction(&self, other: &LabelMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        let changed = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count();
        Ok(changed as f64 / self.labels.len() as f64)
    }
}

/// Per-pixel class probability volume, `|C| x h x w`, each pixel's channel
/// vector summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F: Scalar> {
    tensor: Tensor<F>,
}

/// Normalization slack accepted when validating externally produced maps.
pub const PROBMAP_SUM_TOL: f64 = 1e-6;

impl<F: Scalar> ProbMap<F> {
    /// Validates rank and per-pixel channel sums (within [`PROBMAP_SUM_TOL`]).
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                left: tensor.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        let (c, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
        let tol = F::from_f64_lit(PROBMAP_SUM_TOL);
        for y in 0..h {
            for x in 0..w {
                let mut sum = F::zero();
                for ch in 0..c {
                    sum += tensor.values()[tensor.idx3(ch, y, x)];
                }
                if (sum - F::one()).abs() > tol {
                    return Err(Error::NotNormalized {
                        sum: sum.to_f64().unwrap_or(f64::NAN),
                        row: y,
                        col: x,
                        tol: PROBMAP_SUM_TOL,
                    });
                }
            }
        }
        Ok(ProbMap { tensor })
    }

    /// For tensors already produced by the softmax op; skips re-validation.
    pub fn from_softmax(tensor: Tensor<F>) -> Self {
        debug_assert_eq!(tensor.shape().len(), 3);
        ProbMap { tensor }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    /// Channel distribution at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<F> {
        (0..self.channels())
            .map(|c| self.tensor.values()[self.tensor.idx3(c, row, col)])
            .collect()
    }
}

/// Floors every entry at `eps_log` and renormalizes each pixel's channel
/// vector. Applied to the `q` side of KL terms so log-ratios stay finite.
pub fn floor_normalize<F: Scalar>(p: &ProbMap<F>) -> ProbMap<F> {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut t = p.tensor().clone();
    let eps = F::eps_log();
    for y in 0..h {
        for x in 0..w {
            let mut sum = F::zero();
            for ch in 0..c {
                let i = t.idx3(ch, y, x);
                let v = t.values()[i].max(eps);
                t.values_mut()[i] = v;
                sum += v;
            }
            for ch in 0..c {
                let i = t.idx3(ch, y, x);
                t.values_mut()[i] = t.values()[i] / sum;
            }
        }
    }
    ProbMap { tensor: t }
}

/// KL(p || q) = sum_c p_c (log p_c - log q_c), averaged over pixels.
///
/// `q` is floored and renormalized; logs are clamped at `eps_log`. This is the
/// plain-data form used for prototypes and relabeling; the differentiable form
/// lives in the loss module.
pub fn kl_divergence<F: Scalar>(p: &ProbMap<F>, q: &ProbMap<F>) -> Result<F> {
    if p.tensor().shape() != q.tensor().shape() {
        return Err(Error::ShapeMismatch {
            left: p.tensor().shape().to_vec(),
            right: q.tensor().shape().to_vec(),
        });
    }
    let qn = floor_normalize(q);
    let eps = F::eps_log();
    let mut total = F::zero();
    for (&pv, &qv) in p.tensor().values().iter().zip(qn.tensor().values()) {
        if pv > F::zero() {
            total += pv * (pv.max(eps).ln() - qv.ln());
        }
    }
    let pixels = F::from_usize(p.height() * p.width()).unwrap();
    Ok(total / pixels)
}

/// KL between two bare pixel distributions (same flooring rules).
pub fn kl_divergence_pixel<F: Scalar>(p: &[F], q: &[F]) -> F {
    let eps = F::eps_log();
    let qsum: F = q.iter().fold(F::zero(), |acc, &v| acc + v.max(eps));
    let mut total = F::zero();
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > F::zero() {
            total += pv * (pv.max(eps).ln() - (qv.max(eps) / qsum).ln());
        }
    }
    total
}
