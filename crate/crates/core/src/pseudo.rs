//! Pseudo-label generation and open-set ("boundless") relabeling.
//!
//! Pseudo labels are the per-pixel argmax of a probability map, with the max
//! probability kept as the pixel's confidence. Boundless relabeling then
//! moves low-confidence pixels of physically similar closed-set classes to a
//! fresh open-class id; the KL-distance variant is kept for the ablation.

use crate::error::{Error, Result};
use crate::maps::{kl_divergence_pixel, LabelMap, ProbMap};
use crate::scalar::Scalar;

/// Argmax labels plus per-pixel confidence (the max channel probability).
#[derive(Debug, Clone)]
pub struct PseudoLabels<F: Scalar> {
    pub labels: LabelMap,
    /// Row-major `h*w` confidences in `[0, 1]`.
    pub confidence: Vec<F>,
    /// Training round that produced these labels.
    pub round: usize,
}

/// One open-set class: a fresh id and its similarity group of closed-set
/// classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenClass {
    pub id: u8,
    /// `C_o`: closed-set classes physically similar to this open class.
    pub similar: Vec<u8>,
}

/// Open-set relabeling specification. Similarity groups may overlap; pixel
/// conflicts resolve to the lowest open-class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenSetSpec {
    num_closed: usize,
    opens: Vec<OpenClass>,
}

impl OpenSetSpec {
    pub fn new(num_closed: usize, mut opens: Vec<OpenClass>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for o in &opens {
            if o.similar.is_empty() {
                return Err(Error::InvalidOpenSetSpec(format!(
                    "open class {} has an empty similarity group",
                    o.id
                )));
            }
            if (o.id as usize) < num_closed || o.id == crate::maps::IGNORE_LABEL {
                return Err(Error::InvalidOpenSetSpec(format!(
                    "open class id {} collides with the closed set or the ignore marker",
                    o.id
                )));
            }
            if !seen.insert(o.id) {
                return Err(Error::InvalidOpenSetSpec(format!(
                    "duplicate open class id {}",
                    o.id
                )));
            }
            for &c in &o.similar {
                if c as usize >= num_closed {
                    return Err(Error::InvalidOpenSetSpec(format!(
                        "similarity group of open class {} lists non-closed class {c}",
                        o.id
                    )));
                }
            }
        }
        // Lowest id wins conflicts; keep the scan order canonical.
        opens.sort_by_key(|o| o.id);
        Ok(OpenSetSpec { num_closed, opens })
    }

    pub fn num_closed(&self) -> usize {
        self.num_closed
    }

    pub fn opens(&self) -> &[OpenClass] {
        &self.opens
    }

    /// Total label-space size: closed classes plus open classes.
    pub fn num_total(&self) -> usize {
        self.opens
            .iter()
            .map(|o| o.id as usize + 1)
            .max()
            .unwrap_or(self.num_closed)
            .max(self.num_closed)
    }
}

/// Per-pixel argmax with lowest-index tie-break; confidence is the max
/// channel probability.
pub fn generate_pseudo_labels<F: Scalar>(p: &ProbMap<F>) -> PseudoLabels<F> {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let t = p.tensor();
    let mut labels = Vec::with_capacity(h * w);
    let mut confidence = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = t.values()[t.idx3(0, y, x)];
            for ch in 1..c {
                let v = t.values()[t.idx3(ch, y, x)];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            labels.push(best as u8);
            confidence.push(best_v);
        }
    }
    PseudoLabels {
        labels: LabelMap::new(h, w, labels).expect("label shape"),
        confidence,
        round: 0,
    }
}

/// Per-class thresholds: `tau_c = fraction * max confidence observed among
/// pixels currently labeled c`. Classes absent from every map get `None` and
/// never trigger relabeling.
pub fn resolve_tau<F: Scalar>(
    pseudo: &[PseudoLabels<F>],
    num_closed: usize,
    fraction: f64,
) -> Result<Vec<Option<F>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let mut max_conf: Vec<Option<F>> = vec![None; num_closed];
    for p in pseudo {
        for (i, &label) in p.labels.labels().iter().enumerate() {
            let label = label as usize;
            if label < num_closed {
                let c = p.confidence[i];
                max_conf[label] = Some(match max_conf[label] {
                    Some(m) => m.max(c),
                    None => c,
                });
            }
        }
    }
    let f = F::from_f64_lit(fraction);
    Ok(max_conf.iter().map(|m| m.map(|v| v * f)).collect())
}

/// The pixel-level thresholding operator: a pixel is relabeled to open class
/// `o` iff its confidence is at most `tau(class)` AND its current label lies
/// in `C_o`. Everything else passes through unchanged, so the operator is
/// idempotent (open labels sit outside every similarity group).
pub fn boundless_relabel<F: Scalar>(
    y: &PseudoLabels<F>,
    spec: &OpenSetSpec,
    taus: &[Option<F>],
) -> Result<LabelMap> {
    let mut out = y.labels.clone();
    let mut conflicts = 0usize;
    for row in 0..out.height() {
        for col in 0..out.width() {
            let label = out.get(row, col);
            let conf = y.confidence[row * out.width() + col];
            let mut chosen: Option<u8> = None;
            let mut matches = 0usize;
            for o in spec.opens() {
                if !o.similar.contains(&label) {
                    continue;
                }
                let tau = taus
                    .get(label as usize)
                    .ok_or(Error::UnresolvedTau { class: label as usize })?;
                let tau = match tau {
                    Some(t) => *t,
                    None => continue, // class absent everywhere: never relabels
                };
                if conf <= tau {
                    matches += 1;
                    if chosen.is_none() {
                        chosen = Some(o.id); // opens are sorted: lowest id wins
                    }
                }
            }
            if matches > 1 {
                conflicts += 1;
            }
            if let Some(open_id) = chosen {
                out.set(row, col, open_id);
            }
        }
    }
    if conflicts > 0 {
        log::info!("boundless relabel: {conflicts} pixels matched multiple open classes; lowest id used");
    }
    Ok(out)
}

/// Mean softmax vector over high-confidence pixels of each closed-set class
/// (confidence at or above the class's tau). `None` for absent classes.
pub fn class_prototypes<F: Scalar>(
    maps: &[ProbMap<F>],
    pseudo: &[PseudoLabels<F>],
    num_closed: usize,
    taus: &[Option<F>],
) -> Result<Vec<Option<Vec<F>>>> {
    if maps.len() != pseudo.len() {
        return Err(Error::ShapeMismatch {
            left: vec![maps.len()],
            right: vec![pseudo.len()],
        });
    }
    let channels = maps.first().map(|m| m.channels()).unwrap_or(0);
    let mut sums: Vec<Vec<F>> = vec![vec![F::zero(); channels]; num_closed];
    let mut counts = vec![0usize; num_closed];
    for (map, p) in maps.iter().zip(pseudo) {
        for row in 0..map.height() {
            for col in 0..map.width() {
                let label = p.labels.get(row, col) as usize;
                if label >= num_closed {
                    continue;
                }
                let tau = match taus.get(label).copied().flatten() {
                    Some(t) => t,
                    None => continue,
                };
                if p.confidence[row * map.width() + col] >= tau {
                    for (c, s) in sums[label].iter_mut().enumerate() {
                        *s += map.tensor().values()[map.tensor().idx3(c, row, col)];
                    }
                    counts[label] += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                None
            } else {
                let inv = F::one() / F::from_usize(n).unwrap();
                Some(s.into_iter().map(|v| v * inv).collect())
            }
        })
        .collect())
}

/// Ablation alternative to thresholding: a pixel labeled `c` in some `C_o` is
/// relabeled `o` iff `KL(pixel distribution || prototype_c) > kappa`.
pub fn kl_similarity_relabel<F: Scalar>(
    p: &ProbMap<F>,
    spec: &OpenSetSpec,
    prototypes: &[Option<Vec<F>>],
    kappa: F,
) -> Result<LabelMap> {
    let pseudo = generate_pseudo_labels(p);
    let mut out = pseudo.labels.clone();
    for row in 0..out.height() {
        for col in 0..out.width() {
            let label = out.get(row, col);
            let mut chosen: Option<u8> = None;
            for o in spec.opens() {
                if !o.similar.contains(&label) {
                    continue;
                }
                let proto = prototypes
                    .get(label as usize)
                    .and_then(|p| p.as_ref())
                    .ok_or(Error::MissingPrototype {
                        class: label as usize,
                    })?;
                let pixel = p.pixel(row, col);
                if kl_divergence_pixel(&pixel, proto) > kappa && chosen.is_none() {
                    chosen = Some(o.id);
                }
            }
            if let Some(open_id) = chosen {
                out.set(row, col, open_id);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn spec_vehicle_open() -> OpenSetSpec {
        // Closed set {0..4}, open class 5 similar to vehicle (3).
        OpenSetSpec::new(
            5,
            vec![OpenClass {
                id: 5,
                similar: vec![3],
            }],
        )
        .unwrap()
    }

    #[test]
    fn onehot_argmax() {
        let mut t = Tensor::<f64>::zeros(vec![4, 2, 2]);
        for y in 0..2 {
            for x in 0..2 {
                let i = t.idx3(2, y, x);
                t.values_mut()[i] = 1.0;
            }
        }
        let p = ProbMap::new(t).unwrap();
        let out = generate_pseudo_labels(&p);
        assert!(out.labels.labels().iter().all(|&l| l == 2));
        assert!(out.confidence.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_ties_break_to_lowest_index() {
        let p = ProbMap::new(Tensor::<f64>::filled(vec![4, 2, 2], 0.25)).unwrap();
        let out = generate_pseudo_labels(&p);
        assert!(out.labels.labels().iter().all(|&l| l == 0));
        assert!(out.confidence.iter().all(|&c| (c - 0.25).abs() < 1e-12));
    }

    #[test]
    fn matches_per_pixel_scan_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::named_stream(5, "test/pseudo");
        let (c, h, w) = (3, 4, 4);
        let mut t = Tensor::<f64>::zeros(vec![c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-6).collect();
                let s: f64 = raw.iter().sum();
                for (ch, v) in raw.iter().enumerate() {
                    let i = t.idx3(ch, y, x);
                    t.values_mut()[i] = v / s;
                }
            }
        }
        let p = ProbMap::new(t.clone()).unwrap();
        let out = generate_pseudo_labels(&p);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = f64::MIN;
                for ch in 0..c {
                    let v = t.values()[t.idx3(ch, y, x)];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                assert_eq!(out.labels.get(y, x) as usize, best);
                assert_eq!(out.confidence[y * w + x], best_v);
            }
        }
    }

    fn pseudo_single(label: u8, conf: f64) -> PseudoLabels<f64> {
        PseudoLabels {
            labels: LabelMap::new(1, 1, vec![label]).unwrap(),
            confidence: vec![conf],
            round: 0,
        }
    }

    #[test]
    fn relabel_case_rule() {
        let spec = spec_vehicle_open();
        let mut taus = vec![None; 5];
        taus[3] = Some(0.70);

        // vehicle at confidence 0.60, tau 0.70 -> relabeled open (5)
        let out = boundless_relabel(&pseudo_single(3, 0.60), &spec, &taus).unwrap();
        assert_eq!(out.get(0, 0), 5);

        // vehicle at confidence 0.95 -> unchanged
        let out = boundless_relabel(&pseudo_single(3, 0.95), &spec, &taus).unwrap();
        assert_eq!(out.get(0, 0), 3);

        // sky (1) not in any similarity group -> unchanged however unconfident
        let out = boundless_relabel(&pseudo_single(1, 0.10), &spec, &taus).unwrap();
        assert_eq!(out.get(0, 0), 1);
    }

    #[test]
    fn relabel_is_idempotent() {
        let spec = spec_vehicle_open();
        let taus = vec![None, None, None, Some(0.70), None];
        let y = PseudoLabels {
            labels: LabelMap::new(1, 3, vec![3, 3, 0]).unwrap(),
            confidence: vec![0.5, 0.9, 0.1],
            round: 0,
        };
        let once = boundless_relabel(&y, &spec, &taus).unwrap();
        let again = boundless_relabel(
            &PseudoLabels {
                labels: once.clone(),
                confidence: y.confidence.clone(),
                round: 0,
            },
            &spec,
            &taus,
        )
        .unwrap();
        assert_eq!(once, again);
        assert_eq!(once.labels(), &[5, 3, 0]);
    }

    #[test]
    fn unresolved_tau_is_an_error() {
        let spec = spec_vehicle_open();
        // taus vector too short to cover class 3
        let taus: Vec<Option<f64>> = vec![Some(0.5); 2];
        assert!(matches!(
            boundless_relabel(&pseudo_single(3, 0.1), &spec, &taus),
            Err(Error::UnresolvedTau { class: 3 })
        ));
    }

    #[test]
    fn multiple_open_matches_take_lowest_id() {
        let spec = OpenSetSpec::new(
            5,
            vec![
                OpenClass { id: 6, similar: vec![3] },
                OpenClass { id: 5, similar: vec![3] },
            ],
        )
        .unwrap();
        let taus = vec![None, None, None, Some(0.70), None];
        let out = boundless_relabel(&pseudo_single(3, 0.2), &spec, &taus).unwrap();
        assert_eq!(out.get(0, 0), 5);
    }

    #[test]
    fn resolve_tau_fraction_of_class_max() {
        let y = PseudoLabels::<f64> {
            labels: LabelMap::new(1, 3, vec![2, 2, 2]).unwrap(),
            confidence: vec![0.2, 0.9, 1.0],
            round: 0,
        };
        let taus = resolve_tau(&[y], 5, 0.85).unwrap();
        assert!((taus[2].unwrap() - 0.85).abs() < 1e-12);
        assert!(taus[0].is_none()); // class absent: tau undefined

        assert!(matches!(
            resolve_tau::<f64>(&[], 5, 0.0),
            Err(Error::InvalidFraction(_))
        ));
        assert!(matches!(
            resolve_tau::<f64>(&[], 5, 1.2),
            Err(Error::InvalidFraction(_))
        ));
    }

    #[test]
    fn fraction_one_relabels_every_group_pixel() {
        let spec = spec_vehicle_open();
        let y = PseudoLabels {
            labels: LabelMap::new(1, 3, vec![3, 3, 3]).unwrap(),
            confidence: vec![0.3, 0.8, 0.99],
            round: 0,
        };
        let taus = resolve_tau(std::slice::from_ref(&y), 5, 1.0).unwrap();
        let out = boundless_relabel(&y, &spec, &taus).unwrap();
        assert!(out.labels().iter().all(|&l| l == 5));
    }

    #[test]
    fn kl_relabel_self_similiar_unchanged_and_kappa_zero_boundary() {
        let spec = spec_vehicle_open();
        // Pixel distribution puts most mass on vehicle.
        let t = Tensor::<f64>::new(vec![5, 1, 1], vec![0.05, 0.05, 0.05, 0.8, 0.05]).unwrap();
        let p = ProbMap::new(t).unwrap();
        let pixel = p.pixel(0, 0);

        // Prototype identical to the pixel: KL = 0 <= kappa, unchanged.
        let mut protos: Vec<Option<Vec<f64>>> = vec![None; 5];
        protos[3] = Some(pixel.clone());
        let out = kl_similarity_relabel(&p, &spec, &protos, 0.0).unwrap();
        assert_eq!(out.get(0, 0), 3);

        // Different prototype and kappa = 0: relabeled.
        protos[3] = Some(vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        let out = kl_similarity_relabel(&p, &spec, &protos, 0.0).unwrap();
        assert_eq!(out.get(0, 0), 5);

        // Missing prototype for a class in C_o: error.
        protos[3] = None;
        assert!(matches!(
            kl_similarity_relabel(&p, &spec, &protos, 0.0),
            Err(Error::MissingPrototype { class: 3 })
        ));
    }

    #[test]
    fn open_set_spec_validation() {
        assert!(OpenSetSpec::new(5, vec![OpenClass { id: 5, similar: vec![] }]).is_err());
        assert!(OpenSetSpec::new(5, vec![OpenClass { id: 4, similar: vec![3] }]).is_err());
        assert!(OpenSetSpec::new(5, vec![OpenClass { id: 5, similar: vec![5] }]).is_err());
        assert!(OpenSetSpec::new(5, vec![OpenClass { id: 255, similar: vec![3] }]).is_err());
        let ok = OpenSetSpec::new(5, vec![OpenClass { id: 5, similar: vec![3, 4] }]).unwrap();
        assert_eq!(ok.num_total(), 6);
    }
}
