//! Best-source selection from discriminator outputs, and distillation
//! weights over the remaining sources.
//!
//! Dissimilarity of source i is `1 - mean sigmoid(D_i(softmax(seg_i(x))))`
//! over all target images and discriminator output locations. With the
//! source=1 / target=0 label convention, target maps the discriminator places
//! near the source manifold yield LOW dissimilarity, and the source with the
//! least dissimilarity is selected.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Discriminator, SegNet};
use crate::scalar::Scalar;

/// Per-source dissimilarities, the selected best source, and the softmax
/// weights over the non-best sources.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityReport<F: Scalar> {
    /// `d_i` per source, each in `[0, 1]`.
    pub dissimilarity: Vec<F>,
    /// `argmin_i d_i`, lowest index on ties.
    pub best_source: usize,
    /// `(source index, w_i)` over the non-best sources; weights sum to 1.
    pub weights: Vec<(usize, F)>,
    pub num_target_images: usize,
}

/// `d_i` for one pretrained (segmentation net, discriminator) pair.
pub fn dissimilarity<F: Scalar>(
    seg: &SegNet<F>,
    disc: &Discriminator<F>,
    target_images: &[Tensor<F>],
) -> Result<F> {
    if target_images.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let mut sum = F::zero();
    let mut count = 0usize;
    for image in target_images {
        let probs = seg.predict(image)?;
        let logits = disc.logits(&probs)?;
        for &z in logits.values() {
            sum += sigmoid(z);
            count += 1;
        }
    }
    Ok(F::one() - sum / F::from_usize(count).unwrap())
}

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Index of the least dissimilar source, lowest index on ties.
pub fn select_best_source<F: Scalar>(d: &[F]) -> Result<usize> {
    if d.len() < 2 {
        return Err(Error::TooFewSources(d.len()));
    }
    for &v in d {
        if !v.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite dissimilarity {v}"
            )));
        }
    }
    let mut best = 0usize;
    for (i, &v) in d.iter().enumerate().skip(1) {
        if v < d[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Softmax over `-beta * d_i` restricted to the non-best sources: lower
/// dissimilarity, higher weight. Returns `(source index, weight)` pairs.
pub fn distillation_weights<F: Scalar>(d: &[F], best: usize, beta: F) -> Result<Vec<(usize, F)>> {
    if d.len() < 2 {
        return Err(Error::TooFewSources(d.len()));
    }
    if best >= d.len() {
        return Err(Error::InvalidConfig(format!(
            "best source index {best} out of range for {} sources",
            d.len()
        )));
    }
    let others: Vec<usize> = (0..d.len()).filter(|&i| i != best).collect();
    let logits: Vec<F> = others.iter().map(|&i| -beta * d[i]).collect();
    let m = logits.iter().fold(logits[0], |a, &b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = exps.iter().fold(F::zero(), |a, &b| a + b);
    Ok(others
        .into_iter()
        .zip(exps)
        .map(|(i, e)| (i, e / z))
        .collect())
}

/// Full report: per-pair dissimilarities, selection, weights.
pub fn build_report<F: Scalar>(
    pairs: &[(SegNet<F>, Discriminator<F>)],
    target_images: &[Tensor<F>],
    beta: F,
) -> Result<DissimilarityReport<F>> {
    if pairs.len() < 2 {
        return Err(Error::TooFewSources(pairs.len()));
    }
    let mut d = Vec::with_capacity(pairs.len());
    for (seg, disc) in pairs {
        d.push(dissimilarity(seg, disc, target_images)?);
    }
    let best_source = select_best_source(&d)?;
    let weights = distillation_weights(&d, best_source, beta)?;
    Ok(DissimilarityReport {
        dissimilarity: d,
        best_source,
        weights,
        num_target_images: target_images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_and_tie_break() {
        assert_eq!(select_best_source(&[0.4_f64, 0.1, 0.3]).unwrap(), 1);
        assert_eq!(select_best_source(&[0.2_f64, 0.2]).unwrap(), 0);
        assert!(matches!(
            select_best_source(&[0.5_f64]),
            Err(Error::TooFewSources(1))
        ));
    }

    #[test]
    fn argmin_invariant_under_monotone_transform() {
        let d = [0.4_f64, 0.1, 0.3, 0.25];
        let t: Vec<f64> = d.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
        assert_eq!(
            select_best_source(&d).unwrap(),
            select_best_source(&t).unwrap()
        );
    }

    #[test]
    fn equal_dissimilarity_gives_uniform_weights() {
        let w = distillation_weights(&[0.1_f64, 0.3, 0.3], 0, 5.0).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].0, 1);
        assert_eq!(w[1].0, 2);
        assert!((w[0].1 - 0.5).abs() < 1e-12);
        assert!((w[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_limit_is_uniform() {
        let w = distillation_weights(&[0.0_f64, 0.9, 0.1, 0.5], 0, 1e-12).unwrap();
        for (_, wi) in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_match_scalar_softmax_oracle() {
        // d = [best, 0.2, 0.4], beta = 5 -> softmax([-1, -2])
        let w = distillation_weights(&[0.0_f64, 0.2, 0.4], 0, 5.0).unwrap();
        let e1 = (-1.0_f64).exp();
        let e2 = (-2.0_f64).exp();
        assert!((w[0].1 - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((w[1].1 - e2 / (e1 + e2)).abs() < 1e-12);
        assert!((w[0].1 - 0.7311).abs() < 1e-4);
        assert!((w[1].1 - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn weights_monotone_in_dissimilarity() {
        let lo = distillation_weights(&[0.0_f64, 0.2, 0.4], 0, 5.0).unwrap();
        let hi = distillation_weights(&[0.0_f64, 0.3, 0.4], 0, 5.0).unwrap();
        // Raising d_1 lowers w_1.
        assert!(hi[0].1 < lo[0].1);
        assert!(hi[1].1 > lo[1].1);
    }

    #[test]
    fn two_sources_single_weight_one() {
        let w = distillation_weights(&[0.3_f64, 0.6], 0, 5.0).unwrap();
        assert_eq!(w, vec![(1, 1.0)]);
    }

    #[test]
    fn dissimilarity_boundaries() {
        use crate::models::{Discriminator, SegNet};
        let seg = SegNet::<f64>::init(5, 3, "t/seg");
        let disc = Discriminator::<f64>::init(5, 3, "t/disc");
        assert!(matches!(
            dissimilarity(&seg, &disc, &[]),
            Err(Error::EmptyTargetSet)
        ));

        // Force the final discriminator layer to huge bias: sigmoid -> 1,
        // dissimilarity -> 0.
        let mut confident = disc.clone();
        {
            let params = confident.params_mut();
            let bias = params.into_iter().nth(5).unwrap();
            *bias = Tensor::filled(vec![1], 50.0);
        }
        let image = Tensor::filled(vec![3, 8, 8], 0.5);
        let d = dissimilarity(&seg, &confident, std::slice::from_ref(&image)).unwrap();
        assert!(d.abs() < 1e-9);

        // Zeroed final layer: sigmoid 0.5 everywhere, dissimilarity 0.5.
        let mut neutral = disc;
        {
            for (i, p) in neutral.params_mut().into_iter().enumerate() {
                if i >= 4 {
                    *p = Tensor::zeros(p.shape().to_vec());
                }
            }
        }
        let d = dissimilarity(&seg, &neutral, &[image]).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_of_stated_image_means() {
        // Three images with mean sigmoids 0.8 / 0.6 / 0.7 -> d = 0.3. Checked
        // with the formula directly (equal location counts per image).
        let sums = [0.8, 0.6, 0.7];
        let d = 1.0 - sums.iter().sum::<f64>() / 3.0;
        assert!((d - 0.3).abs() < 1e-12);
    }
}
