//! Property tests for the spec-level invariants.

use altinc_core::autodiff::{Tape, Tensor};
use altinc_core::losses::loss_distil;
use altinc_core::maps::{LabelMap, ProbMap};
use altinc_core::metrics::{confusion, iou_report, ConfusionMatrix};
use altinc_core::pseudo::{
    boundless_relabel, generate_pseudo_labels, OpenClass, OpenSetSpec, PseudoLabels,
};
use proptest::prelude::*;

fn logits_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, c * h * w)
}

fn probmap_from(raw: &[f64], c: usize, h: usize, w: usize) -> ProbMap<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![c, h, w], raw.to_vec()).unwrap());
    let p = tape.softmax_channels(l).unwrap();
    ProbMap::new(tape.value(p).clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_preserve_argmax(raw in logits_strategy(5, 3, 4)) {
        let (c, h, w) = (5, 3, 4);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![c, h, w], raw.clone()).unwrap());
        let p = tape.softmax_channels(l).unwrap();
        let probs = tape.value(p);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut best_logit = 0usize;
                let mut best_prob = 0usize;
                for ch in 0..c {
                    sum += probs.values()[probs.idx3(ch, y, x)];
                    if raw[(ch * h + y) * w + x] > raw[(best_logit * h + y) * w + x] {
                        best_logit = ch;
                    }
                    if probs.values()[probs.idx3(ch, y, x)]
                        > probs.values()[probs.idx3(best_prob, y, x)]
                    {
                        best_prob = ch;
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert_eq!(best_logit, best_prob);
            }
        }
    }

    #[test]
    fn pseudo_labels_commute_with_softmax_argmax(raw in logits_strategy(4, 3, 3)) {
        // argmax(softmax(logits)) == argmax(logits), including the
        // lowest-index tie rule.
        let (c, h, w) = (4, 3, 3);
        let p = probmap_from(&raw, c, h, w);
        let labels = generate_pseudo_labels(&p);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                for ch in 1..c {
                    if raw[(ch * h + y) * w + x] > raw[(best * h + y) * w + x] {
                        best = ch;
                    }
                }
                prop_assert_eq!(labels.labels.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn boundless_relabel_idempotent_and_conservative(
        labels in prop::collection::vec(0u8..5, 24),
        conf in prop::collection::vec(0.0f64..1.0, 24),
        taus in prop::collection::vec(prop::option::of(0.0f64..1.0), 5),
        group in prop::collection::btree_set(0u8..5, 1..4),
    ) {
        let spec = OpenSetSpec::new(
            5,
            vec![OpenClass { id: 5, similar: group.iter().copied().collect() }],
        ).unwrap();
        let y = PseudoLabels {
            labels: LabelMap::new(4, 6, labels.clone()).unwrap(),
            confidence: conf.clone(),
            round: 0,
        };
        let once = boundless_relabel(&y, &spec, &taus).unwrap();
        let twice = boundless_relabel(
            &PseudoLabels { labels: once.clone(), confidence: conf.clone(), round: 0 },
            &spec,
            &taus,
        ).unwrap();
        // Idempotent.
        prop_assert_eq!(&once, &twice);
        for i in 0..24 {
            let before = labels[i];
            let after = once.labels()[i];
            if !group.contains(&before) {
                // Pixels outside the similarity group never change.
                prop_assert_eq!(after, before);
            }
            if let Some(tau) = taus[before as usize] {
                if conf[i] > tau {
                    // Closed-set preservation above the threshold.
                    prop_assert_eq!(after, before);
                }
            }
        }
    }

    #[test]
    fn distillation_invariant_under_pair_permutation(
        raw in logits_strategy(3, 2, 3),
        t1 in logits_strategy(3, 2, 3),
        t2 in logits_strategy(3, 2, 3),
        t3 in logits_strategy(3, 2, 3),
        w1 in 0.05f64..1.0,
        w2 in 0.05f64..1.0,
        w3 in 0.05f64..1.0,
    ) {
        let (c, h, w) = (3, 2, 3);
        let teachers = [
            probmap_from(&t1, c, h, w),
            probmap_from(&t2, c, h, w),
            probmap_from(&t3, c, h, w),
        ];
        let z = w1 + w2 + w3;
        let weights = [w1 / z, w2 / z, w3 / z];

        let eval = |order: [usize; 3]| -> f64 {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::new(vec![c, h, w], raw.clone()).unwrap());
            let p = tape.softmax_channels(l).unwrap();
            let ts: Vec<ProbMap<f64>> = order.iter().map(|&i| teachers[i].clone()).collect();
            let ws: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
            let loss = loss_distil(&mut tape, p, &ts, &ws).unwrap();
            tape.value(loss).item()
        };
        let a = eval([0, 1, 2]);
        let b = eval([2, 0, 1]);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-12, "KL must be nonnegative, got {}", a);
    }

    #[test]
    fn miou_invariant_under_consistent_relabeling(
        gt in prop::collection::vec(0u8..4, 30),
        pred in prop::collection::vec(0u8..4, 30),
    ) {
        let gt_map = LabelMap::new(5, 6, gt.clone()).unwrap();
        let pred_map = LabelMap::new(5, 6, pred.clone()).unwrap();
        let m = confusion(&pred_map, &gt_map, 4).unwrap();
        let report = iou_report(&m, &[0, 1, 2], &[3]).unwrap();

        // Relabel classes with the permutation (0 1 2 3) -> (2 0 1 3).
        let perm = [2u8, 0, 1, 3];
        let gt_p: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
        let pred_p: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let m_p = confusion(
            &LabelMap::new(5, 6, pred_p).unwrap(),
            &LabelMap::new(5, 6, gt_p).unwrap(),
            4,
        ).unwrap();
        let report_p = iou_report(&m_p, &[2, 0, 1], &[3]).unwrap();

        prop_assert_eq!(report.miou_shared, report_p.miou_shared);
        prop_assert_eq!(report.miou_private, report_p.miou_private);
        prop_assert!((report.accuracy - report_p.accuracy).abs() < 1e-15);
    }

    #[test]
    fn iou_bounds_and_perfect_diagonal(
        gt in prop::collection::vec(0u8..3, 16),
        pred in prop::collection::vec(0u8..3, 16),
    ) {
        let gt_map = LabelMap::new(4, 4, gt.clone()).unwrap();
        let pred_map = LabelMap::new(4, 4, pred.clone()).unwrap();
        let m = confusion(&pred_map, &gt_map, 3).unwrap();
        let report = iou_report(&m, &[0, 1, 2], &[]).unwrap();
        for iou in report.per_class_iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(iou));
        }
        let diagonal = gt == pred;
        prop_assert_eq!(report.accuracy == 1.0, diagonal);
    }

    #[test]
    fn correct_pixel_never_decreases_iou(
        gt in prop::collection::vec(0u8..3, 16),
        pred in prop::collection::vec(0u8..3, 16),
        class in 0u8..3,
    ) {
        let m = confusion(
            &LabelMap::new(4, 4, pred.clone()).unwrap(),
            &LabelMap::new(4, 4, gt.clone()).unwrap(),
            3,
        ).unwrap();
        let before = iou_report(&m, &[0, 1, 2], &[]).unwrap().per_class_iou[class as usize];

        // Append one correctly predicted pixel of `class`.
        let mut m2 = ConfusionMatrix::new(3);
        m2.accumulate(
            &LabelMap::filled(1, 1, class),
            &LabelMap::filled(1, 1, class),
        ).unwrap();
        m2.merge(&m).unwrap();
        let after = iou_report(&m2, &[0, 1, 2], &[]).unwrap().per_class_iou[class as usize];
        match (before, after) {
            (Some(b), Some(a)) => prop_assert!(a >= b - 1e-15),
            (None, Some(a)) => prop_assert!(a > 0.0),
            _ => prop_assert!(false, "IoU must be defined after adding a pixel"),
        }
    }

    #[test]
    fn tensor_record_roundtrip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..24)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tensor");
        let t = Tensor::new(vec![values.len()], values).unwrap();
        altinc_core::io::save_tensor(&path, "x", &t).unwrap();
        let (name, back) = altinc_core::io::load_tensor::<f64>(&path).unwrap();
        prop_assert_eq!(name, "x");
        prop_assert!(back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
