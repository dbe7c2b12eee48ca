//! Scratch tuning probe for the toy benchmark. Not part of the deliverable.

use altinc_core::data_synth::*;
use altinc_core::pseudo::{boundless_relabel, resolve_tau};
use altinc_core::trainer::*;
use altinc_core::LabelMap;

fn scene(seed: u64, a: DomainAppearance, perturb: f64, inject: f64) -> SceneConfig {
    let mut cfg = SceneConfig::toy(seed);
    cfg.appearance = a;
    cfg.open_set.perturb = perturb;
    cfg.open_set.inject_prob = inject;
    cfg.vehicle_count = (1, 3);
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_images: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(80);
    let perturb: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let seeds: Vec<u64> = args.get(3).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1, 2, 3]);

    for &seed in &seeds {
        let t0 = std::time::Instant::now();
        let appearances = [
            DomainAppearance { brightness: 0.00, noise_sigma: 0.06, stripe_period: 3, color_shift: -0.06 },
            DomainAppearance { brightness: 0.12, noise_sigma: 0.08, stripe_period: 0, color_shift: 0.06 },
            DomainAppearance { brightness: -0.10, noise_sigma: 0.10, stripe_period: 5, color_shift: 0.10 },
        ];
        let target_app = DomainAppearance { brightness: 0.05, noise_sigma: 0.05, stripe_period: 3, color_shift: -0.03 };

        let mut sources = Vec::new();
        for (i, a) in appearances.iter().enumerate() {
            let cfg = scene(seed, *a, perturb, 0.0);
            sources.push(generate_domain::<f64>(&cfg, n_images, DomainKind::Source(i)).unwrap());
        }
        let tcfg_scene = scene(seed, target_app, perturb, 0.5);
        let target = generate_domain::<f64>(&tcfg_scene, n_images, DomainKind::Target).unwrap();
        let target = inject_open_set(target, &tcfg_scene).unwrap();

        let epochs: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(2);
        let lr: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
        let beta: f64 = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(5.0);
        let l_distil: f64 = std::env::args().nth(7).and_then(|s| s.parse().ok()).unwrap_or(0.1);
        let l_unsup: f64 = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(0.5);
        let l_adv: f64 = std::env::args().nth(9).and_then(|s| s.parse().ok()).unwrap_or(0.01);
        let cfg = TrainConfig::<f64> {
            seed, epochs_per_round: epochs, max_rounds: 2, epsilon: 1e-6, lr, beta,
            loss_weights: altinc_core::losses::LossWeights::new(1.0, l_unsup, l_distil).unwrap(),
            lambda_adv: l_adv,
            ..Default::default()
        };

        let pairs = pretrain_all(&sources, &target, &cfg).unwrap();
        let mut baselines = Vec::new();
        for (i, (seg, _)) in pairs.iter().enumerate() {
            let r = evaluate_model(seg, &target).unwrap();
            baselines.push(r.miou_shared.unwrap());
            print!("s{i}={:.1} ", r.miou_shared.unwrap() * 100.0);
        }
        let best_baseline = baselines.iter().cloned().fold(f64::MIN, f64::max);

        let mut state = initialize_best_source(pairs, &target, &cfg).unwrap();
        let best = state.best_source();
        print!("best={best} d={:?} ", state.report.dissimilarity.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        for _ in 0..cfg.max_rounds {
            altinc_round(&mut state, &sources[best], &target, &cfg).unwrap();
        }
        let rounds: Vec<f64> = state.history.iter().map(|r| r.miou_shared.unwrap() * 100.0).collect();
        let churns: Vec<f64> = state.history.iter().map(|r| (r.churn * 1000.0).round() / 1000.0).collect();

        // confidence split: pred=vehicle pixels by GT (vehicle vs open)
        let taus_probe = resolve_tau(&state.pseudo, 5, 0.85).unwrap();
        let tau_v = taus_probe[3].unwrap_or(f64::NAN);
        let mut below_gt_vehicle = (0usize, 0usize);
        let mut below_gt_open = (0usize, 0usize);
        for (p, (_, gt)) in state.pseudo.iter().zip(&target.items) {
            for (i, &l) in p.labels.labels().iter().enumerate() {
                if l != 3 { continue; }
                let conf = p.confidence[i];
                let g = gt.labels()[i];
                if g == 3 {
                    below_gt_vehicle.1 += 1;
                    if conf <= tau_v { below_gt_vehicle.0 += 1; }
                } else if g == 5 {
                    below_gt_open.1 += 1;
                    if conf <= tau_v { below_gt_open.0 += 1; }
                }
            }
        }
        print!(
            "tau_v={:.3} P(relabel|gtV)={}/{} P(relabel|gtO)={}/{} ",
            tau_v, below_gt_vehicle.0, below_gt_vehicle.1, below_gt_open.0, below_gt_open.1
        );

        // boundless
        let taus = resolve_tau(&state.pseudo, 5, 0.85).unwrap();
        let spec = altinc_core::pseudo::OpenSetSpec::new(5, vec![altinc_core::pseudo::OpenClass { id: 5, similar: vec![3] }]).unwrap();
        let relabeled: Vec<LabelMap> = state.pseudo.iter().map(|p| boundless_relabel(p, &spec, &taus).unwrap()).collect();
        let pre = evaluate_labels(&state.pseudo_label_maps(), &target).unwrap();
        let post = evaluate_labels(&relabeled, &target).unwrap();

        println!(
            "seed={seed} base_best={:.1} rounds={rounds:.1?} churn={churns:?} gain={:+.1} | pre_closed={:.1} post_closed={:.1} deg={:+.2} openIoU={:.1} | {:.0}s",
            best_baseline * 100.0,
            rounds.last().unwrap() - best_baseline * 100.0,
            pre.miou_shared.unwrap() * 100.0,
            post.miou_shared.unwrap() * 100.0,
            (pre.miou_shared.unwrap() - post.miou_shared.unwrap()) * 100.0,
            post.miou_private.unwrap_or(0.0) * 100.0,
            t0.elapsed().as_secs_f64()
        );
    }
}
