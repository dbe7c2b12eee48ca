//! Training losses: supervised and pseudo-label cross entropy, multi-source
//! KL distillation, their weighted combination, and the adversarial pair for
//! discriminator and segmentation updates.
//!
//! Cross entropies are MEANS over non-ignored pixels rather than raw sums, so
//! the lambda weights stay resolution-independent; for a fixed image size the
//! two differ by a positive constant and share minimizers.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::maps::{floor_normalize, LabelMap, ProbMap, IGNORE_LABEL};
use crate::scalar::Scalar;

/// Weights for the combined objective. Finite, nonnegative, not all zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F: Scalar> {
    pub sup: F,
    pub unsup: F,
    pub distil: F,
}

impl<F: Scalar> LossWeights<F> {
    pub fn new(sup: F, unsup: F, distil: F) -> Result<Self> {
        for (name, v) in [("sup", sup), ("unsup", unsup), ("distil", distil)] {
            if !v.is_finite() || v < F::zero() {
                return Err(Error::InvalidLossWeights(format!(
                    "lambda_{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if sup == F::zero() && unsup == F::zero() && distil == F::zero() {
            return Err(Error::InvalidLossWeights(
                "at least one lambda must be positive".into(),
            ));
        }
        Ok(LossWeights { sup, unsup, distil })
    }
}

impl<F: Scalar> Default for LossWeights<F> {
    /// Supervision dominates round 1; see the config documentation.
    fn default() -> Self {
        LossWeights {
            sup: F::one(),
            unsup: F::from_f64_lit(0.5),
            distil: F::from_f64_lit(0.1),
        }
    }
}

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanKind {
    Vanilla,
    LeastSquares,
}

impl std::str::FromStr for GanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(GanKind::Vanilla),
            "lsgan" => Ok(GanKind::LeastSquares),
            other => Err(Error::InvalidConfig(format!(
                "gan must be 'vanilla' or 'lsgan', got {other:?}"
            ))),
        }
    }
}

/// Mean cross entropy `-log p[y]` over non-ignored pixels.
///
/// Gradients flow through the probabilities (and the logits behind them);
/// the labels are constants. Returns a zero scalar when every pixel is
/// ignored.
fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, probs: Var, labels: &LabelMap) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 3 || shape[1] != labels.height() || shape[2] != labels.width() {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: vec![labels.height(), labels.width()],
        });
    }
    let classes = shape[0];
    let mut mask = crate::autodiff::Tensor::<F>::zeros(shape.clone());
    let mut count = 0usize;
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let label = labels.get(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            let label = label as usize;
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    limit: classes,
                    row: y,
                    col: x,
                });
            }
            let idx = mask.idx3(label, y, x);
            mask.values_mut()[idx] = F::one();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(tape.scalar_const(F::zero()));
    }
    let mask = tape.constant(mask);
    let log_p = tape.log(probs);
    let picked = tape.mul(log_p, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -F::one() / F::from_usize(count).unwrap()))
}

/// Supervised cross entropy against ground-truth labels.
pub fn loss_sup<F: Scalar>(tape: &mut Tape<F>, probs: Var, labels: &LabelMap) -> Result<Var> {
    cross_entropy(tape, probs, labels)
}

/// Cross entropy against pseudo labels frozen at round start. Identical math
/// to [`loss_sup`]; the targets are plain data, so no gradient can reach the
/// model that produced them.
pub fn loss_unsup<F: Scalar>(tape: &mut Tape<F>, probs: Var, pseudo: &LabelMap) -> Result<Var> {
    cross_entropy(tape, probs, pseudo)
}

/// Weighted multi-source distillation:
/// `sum_i w_i * mean_pixels KL(p_current || P_i)`.
///
/// Teacher maps are floored at `eps_log` and renormalized; weights must sum
/// to 1 (±1e-9) over the non-best sources.
pub fn loss_distil<F: Scalar>(
    tape: &mut Tape<F>,
    probs: Var,
    teachers: &[ProbMap<F>],
    weights: &[F],
) -> Result<Var> {
    if teachers.len() != weights.len() || teachers.is_empty() {
        return Err(Error::InvalidLossWeights(format!(
            "{} teacher maps vs {} weights",
            teachers.len(),
            weights.len()
        )));
    }
    let wsum = weights.iter().fold(F::zero(), |acc, &w| acc + w);
    if (wsum - F::one()).abs() > F::from_f64_lit(1e-9) {
        return Err(Error::InvalidLossWeights(format!(
            "distillation weights sum to {wsum}, expected 1"
        )));
    }
    let p_shape = tape.value(probs).shape().to_vec();
    let pixels = F::from_usize(p_shape[1] * p_shape[2]).unwrap();
    let log_p = tape.log(probs);
    let mut total: Option<Var> = None;
    for (teacher, &w) in teachers.iter().zip(weights) {
        if teacher.tensor().shape() != p_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                left: p_shape,
                right: teacher.tensor().shape().to_vec(),
            });
        }
        let q = tape.constant(floor_normalize(teacher).into_tensor());
        let log_q = tape.log(q);
        let ratio = tape.sub(log_p, log_q)?;
        let weighted = tape.mul(probs, ratio)?;
        let sum = tape.sum_all(weighted);
        let term = tape.scale(sum, w / pixels);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one teacher"))
}

/// `lambda_sup * L_sup + lambda_unsup * L_unsup + lambda_distil * L_distil`.
pub fn loss_overall<F: Scalar>(
    tape: &mut Tape<F>,
    sup: Var,
    unsup: Var,
    distil: Var,
    lw: &LossWeights<F>,
) -> Result<Var> {
    let a = tape.scale(sup, lw.sup);
    let b = tape.scale(unsup, lw.unsup);
    let c = tape.scale(distil, lw.distil);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Mean binary cross entropy pushing every logit toward label 1.
fn bce_toward_one<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    let s = tape.sigmoid(logits);
    let ls = tape.log(s);
    let m = tape.mean_all(ls);
    tape.scale(m, -F::one())
}

/// Mean binary cross entropy pushing every logit toward label 0
/// (`-log(1 - sigmoid(z)) = -log(sigmoid(-z))`).
fn bce_toward_zero<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    let neg = tape.scale(logits, -F::one());
    bce_toward_one(tape, neg)
}

/// Mean `(sigmoid(z) - target)^2`.
fn lsq_toward<F: Scalar>(tape: &mut Tape<F>, logits: Var, target: F) -> Result<Var> {
    let s = tape.sigmoid(logits);
    let t = tape.scalar_const(target);
    let d = tape.sub(s, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Discriminator objective: source maps toward label 1, target maps toward
/// label 0.
pub fn loss_disc<F: Scalar>(
    tape: &mut Tape<F>,
    d_out_src: Var,
    d_out_tgt: Var,
    kind: GanKind,
) -> Result<Var> {
    let (src_term, tgt_term) = match kind {
        GanKind::Vanilla => (
            bce_toward_one(tape, d_out_src),
            bce_toward_zero(tape, d_out_tgt),
        ),
        GanKind::LeastSquares => (
            lsq_toward(tape, d_out_src, F::one())?,
            lsq_toward(tape, d_out_tgt, F::zero())?,
        ),
    };
    tape.add(src_term, tgt_term)
}

/// Adversarial objective for the segmentation step: target maps toward label
/// 1, i.e. fool the discriminator into calling them source.
pub fn loss_adv<F: Scalar>(tape: &mut Tape<F>, d_out_tgt: Var, kind: GanKind) -> Result<Var> {
    match kind {
        GanKind::Vanilla => Ok(bce_toward_one(tape, d_out_tgt)),
        GanKind::LeastSquares => lsq_toward(tape, d_out_tgt, F::one()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    type T = Tape<f64>;

    fn onehot_map(c: usize, h: usize, w: usize, class: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let i = t.idx3(class, y, x);
                t.values_mut()[i] = 1.0;
            }
        }
        t
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let mut tape = T::new();
        let p = tape.constant(onehot_map(3, 2, 2, 1));
        let y = LabelMap::filled(2, 2, 1);
        let l = loss_sup(&mut tape, p, &y).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_log_c() {
        let mut tape = T::new();
        let p = tape.constant(Tensor::filled(vec![4, 2, 2], 0.25));
        let y = LabelMap::filled(2, 2, 3);
        let l = loss_sup(&mut tape, p, &y).unwrap();
        assert!((tape.value(l).item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_per_pixel_oracle() {
        // Random-ish 3-class 2x2 map, oracle summed by hand per pixel.
        let values = vec![
            0.5, 0.2, 0.1, 0.7, // class 0 plane
            0.3, 0.5, 0.2, 0.2, // class 1 plane
            0.2, 0.3, 0.7, 0.1, // class 2 plane
        ];
        let labels = LabelMap::new(2, 2, vec![0, 2, 1, 0]).unwrap();
        let mut tape = T::new();
        let p = tape.constant(Tensor::new(vec![3, 2, 2], values.clone()).unwrap());
        let l = loss_sup(&mut tape, p, &labels).unwrap();
        let picked = [values[0], values[9], values[6], values[3]];
        let oracle: f64 = picked.iter().map(|v| -v.ln()).sum::<f64>() / 4.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_excluded() {
        let mut tape = T::new();
        let p = tape.constant(Tensor::filled(vec![2, 1, 2], 0.5));
        let labels = LabelMap::new(1, 2, vec![0, IGNORE_LABEL]).unwrap();
        let l = loss_sup(&mut tape, p, &labels).unwrap();
        assert!((tape.value(l).item() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_names_pixel() {
        let mut tape = T::new();
        let p = tape.constant(Tensor::filled(vec![2, 1, 2], 0.5));
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        match loss_sup(&mut tape, p, &labels) {
            Err(Error::LabelOutOfRange { label: 2, limit: 2, row: 0, col: 1 }) => {}
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }

    #[test]
    fn unsup_equals_sup_on_same_targets() {
        let mut tape = T::new();
        let t = Tensor::new(vec![2, 1, 2], vec![0.6, 0.1, 0.4, 0.9]).unwrap();
        let p = tape.constant(t);
        let y = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let a = loss_sup(&mut tape, p, &y).unwrap();
        let b = loss_unsup(&mut tape, p, &y).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn distil_zero_on_identical_maps() {
        let mut tape = T::new();
        let t = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap();
        let p = tape.constant(t.clone());
        let teacher = ProbMap::new(t).unwrap();
        let l = loss_distil(&mut tape, p, &[teacher.clone(), teacher], &[0.4, 0.6]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-10);
    }

    #[test]
    fn distil_onehot_vs_uniform_is_ln2() {
        let mut tape = T::new();
        let p = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap());
        let teacher = ProbMap::new(Tensor::filled(vec![2, 1, 1], 0.5)).unwrap();
        let l = loss_distil(&mut tape, p, &[teacher], &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn distil_matches_per_source_oracle() {
        let p_vals = vec![0.2, 0.5, 0.9, 0.8, 0.5, 0.1];
        let q1_vals = vec![0.6, 0.3, 0.5, 0.4, 0.7, 0.5];
        let q2_vals = vec![0.1, 0.8, 0.2, 0.9, 0.2, 0.8];
        let shape = vec![2, 1, 3];
        let p_t = Tensor::new(shape.clone(), p_vals.clone()).unwrap();
        let q1 = ProbMap::new(Tensor::new(shape.clone(), q1_vals.clone()).unwrap()).unwrap();
        let q2 = ProbMap::new(Tensor::new(shape.clone(), q2_vals.clone()).unwrap()).unwrap();
        let mut tape = T::new();
        let p = tape.constant(p_t);
        let l = loss_distil(&mut tape, p, &[q1, q2], &[0.3, 0.7]).unwrap();

        // Hand-summed per-source KL, mean over the 3 pixels.
        let kl = |pv: &[f64], qv: &[f64]| -> f64 {
            let mut total = 0.0;
            for px in 0..3 {
                for c in 0..2 {
                    let p_c = pv[c * 3 + px];
                    let q_c = qv[c * 3 + px];
                    total += p_c * (p_c.ln() - q_c.ln());
                }
            }
            total / 3.0
        };
        let oracle = 0.3 * kl(&p_vals, &q1_vals) + 0.7 * kl(&p_vals, &q2_vals);
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn distil_invariant_under_source_permutation() {
        let shape = vec![2, 1, 2];
        let p_t = Tensor::new(shape.clone(), vec![0.4, 0.9, 0.6, 0.1]).unwrap();
        let q1 = ProbMap::new(Tensor::new(shape.clone(), vec![0.2, 0.5, 0.8, 0.5]).unwrap()).unwrap();
        let q2 = ProbMap::new(Tensor::new(shape, vec![0.7, 0.3, 0.3, 0.7]).unwrap()).unwrap();
        let mut tape = T::new();
        let p = tape.constant(p_t);
        let a = loss_distil(&mut tape, p, &[q1.clone(), q2.clone()], &[0.3, 0.7]).unwrap();
        let b = loss_distil(&mut tape, p, &[q2, q1], &[0.7, 0.3]).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn overall_is_weighted_sum() {
        let mut tape = T::new();
        let sup = tape.scalar_const(2.0);
        let unsup = tape.scalar_const(1.0);
        let distil = tape.scalar_const(3.0);
        let lw = LossWeights::new(1.0, 0.5, 0.1).unwrap();
        let l = loss_overall(&mut tape, sup, unsup, distil, &lw).unwrap();
        assert!((tape.value(l).item() - 2.8).abs() < 1e-12);

        let proj = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let l = loss_overall(&mut tape, sup, unsup, distil, &proj).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn all_zero_weights_rejected() {
        assert!(matches!(
            LossWeights::<f64>::new(0.0, 0.0, 0.0),
            Err(Error::InvalidLossWeights(_))
        ));
        assert!(LossWeights::<f64>::new(0.0, 0.0, 0.1).is_ok());
        assert!(LossWeights::<f64>::new(-1.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn disc_loss_at_zero_logits() {
        let mut tape = T::new();
        let src = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let tgt = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let v = loss_disc(&mut tape, src, tgt, GanKind::Vanilla).unwrap();
        assert!((tape.value(v).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let ls = loss_disc(&mut tape, src, tgt, GanKind::LeastSquares).unwrap();
        assert!((tape.value(ls).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_near_zero_loss() {
        let mut tape = T::new();
        let src = tape.constant(Tensor::filled(vec![1, 2, 2], 20.0));
        let tgt = tape.constant(Tensor::filled(vec![1, 2, 2], -20.0));
        let v = loss_disc(&mut tape, src, tgt, GanKind::Vanilla).unwrap();
        assert!(tape.value(v).item() < 1e-6);
    }

    #[test]
    fn adv_loss_values_and_gradient_sign() {
        let mut tape = T::new();
        let zero = tape.constant(Tensor::zeros(vec![1, 1, 1]));
        let l = loss_adv(&mut tape, zero, GanKind::Vanilla).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let fooled = tape.constant(Tensor::filled(vec![1, 1, 1], 20.0));
        let l = loss_adv(&mut tape, fooled, GanKind::Vanilla).unwrap();
        assert!(tape.value(l).item() < 1e-6);

        // Loss decreases as the target logit rises: gradient is negative.
        let mut tape = T::new();
        let logit = tape.param(Tensor::filled(vec![1, 1, 1], 0.3));
        let l = loss_adv(&mut tape, logit, GanKind::Vanilla).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(logit).unwrap().values()[0] < 0.0);
    }
}
