//! Training orchestration: adversarial single-source pretraining, best-source
//! initialization, and the alternating-incremental self-training loop.
//!
//! Each alternating round freezes the previous round's pseudo labels, trains
//! the model to the round budget on supervised, pseudo-label, distillation
//! and adversarial terms, then regenerates pseudo labels and records the
//! churn (fraction of target pixels whose pseudo label changed). The loop
//! stops when churn falls below epsilon or the round budget is exhausted.

use rand::seq::SliceRandom;

use crate::autodiff::{Sgd, Tape, Tensor, Var};
use crate::data_synth::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::{
    loss_adv, loss_disc, loss_distil, loss_overall, loss_sup, loss_unsup, GanKind, LossWeights,
};
use crate::maps::{LabelMap, ProbMap};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::models::{Discriminator, ModelBundle, SegNet};
use crate::pseudo::{generate_pseudo_labels, PseudoLabels};
use crate::rng::named_stream;
use crate::scalar::Scalar;
use crate::source_select::{build_report, DissimilarityReport};

/// Loop controls and hyperparameters. The paper-side choices (optimizer,
/// learning rates, batch size, lambdas) are all surfaced here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<F: Scalar> {
    pub seed: u64,
    pub epochs_per_round: usize,
    pub max_rounds: usize,
    pub lr: F,
    pub momentum: F,
    pub batch_size: usize,
    pub loss_weights: LossWeights<F>,
    /// Weight of the adversarial term in segmentation steps; 0 disables it.
    pub lambda_adv: F,
    pub gan_kind: GanKind,
    /// Sharpness of the dissimilarity-to-weight softmax.
    pub beta: F,
    /// Stop when pseudo-label churn drops below this, in (0, 1).
    pub epsilon: f64,
    /// Per-class threshold fraction for boundless relabeling.
    pub tau_fraction: f64,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs_per_round: 2,
            max_rounds: 4,
            lr: F::from_f64_lit(0.05),
            momentum: F::from_f64_lit(0.9),
            batch_size: 4,
            loss_weights: LossWeights::default(),
            lambda_adv: F::from_f64_lit(0.01),
            gan_kind: GanKind::Vanilla,
            beta: F::from_f64_lit(5.0),
            epsilon: 0.01,
            tau_fraction: 0.85,
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.into()));
        if self.epochs_per_round == 0 {
            return bad("epochs_per_round must be positive");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lr < F::zero() || !self.lr.is_finite() {
            return bad("lr must be nonnegative and finite");
        }
        if self.momentum < F::zero() || self.momentum >= F::one() || self.momentum.is_nan() {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lambda_adv < F::zero() || !self.lambda_adv.is_finite() {
            return bad("lambda_adv must be nonnegative and finite");
        }
        if self.beta <= F::zero() || self.beta.is_nan() {
            return bad("beta must be positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.epsilon >= 1.0 {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.tau_fraction.is_nan() || self.tau_fraction <= 0.0 || self.tau_fraction > 1.0 {
            return bad("tau_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    /// Fraction of target pixels whose pseudo label changed at round end.
    pub churn: f64,
    pub mean_sup: f64,
    pub mean_unsup: f64,
    pub mean_distil: f64,
    pub mean_adv: f64,
    pub mean_disc: f64,
    /// Shared-class mIoU on the target set, when its ground truth is present.
    pub miou_shared: Option<f64>,
}

/// Alternating-incremental training state.
///
/// Invariants: `pseudo` for round r was produced by the model at the end of
/// round r-1 (round 0: by the best-source model); `history.len()` equals
/// completed rounds; teacher nets stay bit-identical across rounds.
pub struct AltIncState<F: Scalar> {
    /// The adapting segmentation net plus one discriminator per source (only
    /// the best source's discriminator keeps training).
    pub bundle: ModelBundle<F>,
    pub report: DissimilarityReport<F>,
    /// `(source index, frozen net)` for the non-best sources.
    pub teachers: Vec<(usize, SegNet<F>)>,
    /// Frozen teacher predictions per teacher per target image.
    pub teacher_preds: Vec<Vec<ProbMap<F>>>,
    /// Current pseudo labels for every target image.
    pub pseudo: Vec<PseudoLabels<F>>,
    /// Completed rounds.
    pub round: usize,
    pub history: Vec<RoundRecord>,
}

impl<F: Scalar> AltIncState<F> {
    pub fn best_source(&self) -> usize {
        self.report.best_source
    }

    /// Final pseudo-label maps (the paper's y_Alt-Inc).
    pub fn pseudo_label_maps(&self) -> Vec<LabelMap> {
        self.pseudo.iter().map(|p| p.labels.clone()).collect()
    }
}

fn shuffled_indices(n: usize, seed: u64, stream: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut named_stream(seed, stream));
    order
}

fn batch_mean<F: Scalar>(tape: &mut Tape<F>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, F::one() / F::from_usize(terms.len()).unwrap()))
}

fn apply_grads<F: Scalar>(
    tape: &Tape<F>,
    grads: &crate::autodiff::Gradients<F>,
    vars: &[Var],
    params: Vec<&mut Tensor<F>>,
    opt: &mut Sgd<F>,
) -> Result<()> {
    let zero_shapes: Vec<Vec<usize>> = vars
        .iter()
        .map(|&v| tape.value(v).shape().to_vec())
        .collect();
    let grad_tensors: Vec<Tensor<F>> = vars
        .iter()
        .zip(zero_shapes)
        .map(|(&v, shape)| match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        })
        .collect();
    let mut params = params;
    let grad_refs: Vec<&Tensor<F>> = grad_tensors.iter().collect();
    opt.step(&mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(), &grad_refs)
}

/// One adversarial single-source DA pretraining run.
///
/// Alternates per step: (a) a segmentation update driven by supervised loss
/// on a source batch plus `lambda_adv` times the adversarial loss on a target
/// batch, and (b) a discriminator update on the step's detached probability
/// maps. Deterministic under the config seed.
pub fn pretrain_single_source<F: Scalar>(
    source: &DomainDataset<F>,
    target: &DomainDataset<F>,
    cfg: &TrainConfig<F>,
    source_index: usize,
) -> Result<(SegNet<F>, Discriminator<F>)> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let num_classes = source.num_closed;
    let mut seg = SegNet::init(num_classes, cfg.seed, &format!("init/source{source_index}/seg"));
    let mut disc =
        Discriminator::init(num_classes, cfg.seed, &format!("init/source{source_index}/disc"));
    let mut opt_seg = Sgd::new(cfg.lr, cfg.momentum);
    let mut opt_disc = Sgd::new(cfg.lr, cfg.momentum);

    let steps_per_epoch = source.len().max(target.len()).div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs_per_round {
        let prefix = format!("pretrain/source{source_index}/epoch{epoch}");
        let src_order = shuffled_indices(source.len(), cfg.seed, &format!("{prefix}/src"));
        let tgt_order = shuffled_indices(target.len(), cfg.seed, &format!("{prefix}/tgt"));
        for step in 0..steps_per_epoch {
            let src_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|j| src_order[(step * cfg.batch_size + j) % source.len()])
                .collect();
            let tgt_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|j| tgt_order[(step * cfg.batch_size + j) % target.len()])
                .collect();
            train_step_single_source(
                source, target, &src_batch, &tgt_batch, &mut seg, &mut disc, &mut opt_seg,
                &mut opt_disc, cfg,
            )?;
        }
    }
    Ok((seg, disc))
}

#[allow(clippy::too_many_arguments)]
fn train_step_single_source<F: Scalar>(
    source: &DomainDataset<F>,
    target: &DomainDataset<F>,
    src_batch: &[usize],
    tgt_batch: &[usize],
    seg: &mut SegNet<F>,
    disc: &mut Discriminator<F>,
    opt_seg: &mut Sgd<F>,
    opt_disc: &mut Sgd<F>,
    cfg: &TrainConfig<F>,
) -> Result<(f64, f64, f64)> {
    // (a) segmentation step: discriminator enters untracked.
    let mut tape = Tape::new();
    let seg_vars = seg.register(&mut tape, true);
    let disc_vars = disc.register(&mut tape, false);

    let mut sup_terms = Vec::with_capacity(src_batch.len());
    let mut src_probs = Vec::with_capacity(src_batch.len());
    for &i in src_batch {
        let (image, gt) = &source.items[i];
        let img = tape.constant(image.clone());
        let logits = seg.forward(&mut tape, &seg_vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        sup_terms.push(loss_sup(&mut tape, probs, gt)?);
        src_probs.push(tape.value(probs).clone());
    }
    let sup = batch_mean(&mut tape, &sup_terms)?;

    let mut adv_terms = Vec::with_capacity(tgt_batch.len());
    let mut tgt_probs = Vec::with_capacity(tgt_batch.len());
    for &i in tgt_batch {
        let (image, _) = &target.items[i];
        let img = tape.constant(image.clone());
        let logits = seg.forward(&mut tape, &seg_vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        tgt_probs.push(tape.value(probs).clone());
        if cfg.lambda_adv > F::zero() {
            let d_out = disc.forward(&mut tape, &disc_vars, probs)?;
            adv_terms.push(loss_adv(&mut tape, d_out, cfg.gan_kind)?);
        }
    }
    let (total, adv_value) = if adv_terms.is_empty() {
        (sup, 0.0)
    } else {
        let adv = batch_mean(&mut tape, &adv_terms)?;
        let weighted = tape.scale(adv, cfg.lambda_adv);
        (
            tape.add(sup, weighted)?,
            tape.value(adv).item().to_f64().unwrap(),
        )
    };
    let sup_value = tape.value(sup).item().to_f64().unwrap();
    let grads = tape.backward(total)?;
    apply_grads(&tape, &grads, &seg_vars.vars(), seg.params_mut(), opt_seg)?;

    // (b) discriminator step on the detached maps from (a).
    let mut dtape = Tape::new();
    let dvars = disc.register(&mut dtape, true);
    let mut disc_terms = Vec::with_capacity(src_probs.len());
    for (ps, pt) in src_probs.into_iter().zip(tgt_probs) {
        let ps = dtape.constant(ps);
        let pt = dtape.constant(pt);
        let ds = disc.forward(&mut dtape, &dvars, ps)?;
        let dt = disc.forward(&mut dtape, &dvars, pt)?;
        disc_terms.push(loss_disc(&mut dtape, ds, dt, cfg.gan_kind)?);
    }
    let dloss = batch_mean(&mut dtape, &disc_terms)?;
    let disc_value = dtape.value(dloss).item().to_f64().unwrap();
    let dgrads = dtape.backward(dloss)?;
    apply_grads(&dtape, &dgrads, &dvars.vars(), disc.params_mut(), opt_disc)?;

    Ok((sup_value, adv_value, disc_value))
}

/// Pretrains one (SegNet, Discriminator) pair per source.
pub fn pretrain_all<F: Scalar>(
    sources: &[DomainDataset<F>],
    target: &DomainDataset<F>,
    cfg: &TrainConfig<F>,
) -> Result<Vec<(SegNet<F>, Discriminator<F>)>> {
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| pretrain_single_source(s, target, cfg, i))
        .collect()
}

/// Builds the initial alternating-incremental state from pretrained pairs:
/// dissimilarity report, best-source parameter copy, frozen teachers and
/// their target predictions, round-0 pseudo labels.
pub fn initialize_best_source<F: Scalar>(
    pairs: Vec<(SegNet<F>, Discriminator<F>)>,
    target: &DomainDataset<F>,
    cfg: &TrainConfig<F>,
) -> Result<AltIncState<F>> {
    cfg.validate()?;
    let target_images: Vec<Tensor<F>> = target.images().cloned().collect();
    let report = build_report(&pairs, &target_images, cfg.beta)?;
    let best = report.best_source;

    let seg = pairs[best].0.clone();
    let discs: Vec<Discriminator<F>> = pairs.iter().map(|(_, d)| d.clone()).collect();
    let bundle = ModelBundle::new(seg, discs);

    let mut teachers = Vec::new();
    let mut teacher_preds = Vec::new();
    for &(i, _) in &report.weights {
        let net = pairs[i].0.clone();
        let preds: Result<Vec<ProbMap<F>>> =
            target_images.iter().map(|img| net.predict(img)).collect();
        teachers.push((i, net));
        teacher_preds.push(preds?);
    }

    let mut pseudo = Vec::with_capacity(target_images.len());
    for img in &target_images {
        let probs = bundle.seg.predict(img)?;
        pseudo.push(generate_pseudo_labels(&probs));
    }

    Ok(AltIncState {
        bundle,
        report,
        teachers,
        teacher_preds,
        pseudo,
        round: 0,
        history: Vec::new(),
    })
}

/// One alternating round: train on the frozen round-start pseudo labels, then
/// regenerate them and record churn.
pub fn altinc_round<F: Scalar>(
    state: &mut AltIncState<F>,
    best_source: &DomainDataset<F>,
    target: &DomainDataset<F>,
    cfg: &TrainConfig<F>,
) -> Result<()> {
    cfg.validate()?;
    let n_teachers = state.report.weights.len();
    if state.teachers.len() != n_teachers || state.teacher_preds.len() != n_teachers {
        return Err(Error::MissingFrozenSources {
            expected: n_teachers,
            got: state.teachers.len().min(state.teacher_preds.len()),
        });
    }
    if target.len() != state.pseudo.len() {
        return Err(Error::InvalidConfig(
            "pseudo-label count does not match target dataset".into(),
        ));
    }
    let weights: Vec<F> = state.report.weights.iter().map(|&(_, w)| w).collect();
    let round = state.round + 1; // 1-based for records and stream names
    let best = state.best_source();

    // The round trains against a snapshot of the round-start pseudo labels.
    let frozen_pseudo: Vec<LabelMap> = state.pseudo.iter().map(|p| p.labels.clone()).collect();

    let mut opt_seg = Sgd::new(cfg.lr, cfg.momentum);
    let mut opt_disc = Sgd::new(cfg.lr, cfg.momentum);
    let mut sums = [0.0f64; 5]; // sup, unsup, distil, adv, disc
    let mut steps = 0usize;

    let steps_per_epoch = best_source.len().max(target.len()).div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs_per_round {
        let prefix = format!("altinc/round{round}/epoch{epoch}");
        let src_order =
            shuffled_indices(best_source.len(), cfg.seed, &format!("{prefix}/src"));
        let tgt_order = shuffled_indices(target.len(), cfg.seed, &format!("{prefix}/tgt"));
        for step in 0..steps_per_epoch {
            let src_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|j| src_order[(step * cfg.batch_size + j) % best_source.len()])
                .collect();
            let tgt_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|j| tgt_order[(step * cfg.batch_size + j) % target.len()])
                .collect();

            let step_losses = altinc_step(
                state,
                best_source,
                target,
                &frozen_pseudo,
                &weights,
                &src_batch,
                &tgt_batch,
                best,
                &mut opt_seg,
                &mut opt_disc,
                cfg,
            )?;
            for (s, v) in sums.iter_mut().zip(step_losses) {
                *s += v;
            }
            steps += 1;
        }
    }

    // Regenerate pseudo labels from the updated model; measure churn and,
    // when ground truth is available, the shared-class mIoU.
    let mut changed = 0u64;
    let mut total = 0u64;
    let mut new_pseudo = Vec::with_capacity(target.len());
    let mut confusion: Option<ConfusionMatrix> = None;
    let num_total = num_eval_classes(target);
    for (i, (image, gt)) in target.items.iter().enumerate() {
        let probs = state.bundle.seg.predict(image)?;
        let mut p = generate_pseudo_labels(&probs);
        p.round = round;
        changed += p
            .labels
            .labels()
            .iter()
            .zip(frozen_pseudo[i].labels())
            .filter(|(a, b)| a != b)
            .count() as u64;
        total += p.labels.len() as u64;
        let m = confusion.get_or_insert_with(|| ConfusionMatrix::new(num_total));
        m.accumulate(&p.labels, gt)?;
        new_pseudo.push(p);
    }
    let churn = changed as f64 / total as f64;
    let miou_shared = confusion.as_ref().and_then(|m| {
        shared_private_split(target)
            .and_then(|(shared, private)| crate::metrics::iou_report(m, &shared, &private).ok())
            .and_then(|r| r.miou_shared)
    });

    state.pseudo = new_pseudo;
    state.round = round;
    let denom = steps.max(1) as f64;
    state.history.push(RoundRecord {
        round,
        churn,
        mean_sup: sums[0] / denom,
        mean_unsup: sums[1] / denom,
        mean_distil: sums[2] / denom,
        mean_adv: sums[3] / denom,
        mean_disc: sums[4] / denom,
        miou_shared,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn altinc_step<F: Scalar>(
    state: &mut AltIncState<F>,
    best_source: &DomainDataset<F>,
    target: &DomainDataset<F>,
    frozen_pseudo: &[LabelMap],
    weights: &[F],
    src_batch: &[usize],
    tgt_batch: &[usize],
    best: usize,
    opt_seg: &mut Sgd<F>,
    opt_disc: &mut Sgd<F>,
    cfg: &TrainConfig<F>,
) -> Result<[f64; 5]> {
    let mut tape = Tape::new();
    let seg_vars = state.bundle.seg.register(&mut tape, true);
    let disc = &state.bundle.discs[best];
    let disc_vars = disc.register(&mut tape, false);

    // Supervised term on best-source batches.
    let mut sup_terms = Vec::with_capacity(src_batch.len());
    let mut src_probs = Vec::with_capacity(src_batch.len());
    for &i in src_batch {
        let (image, gt) = &best_source.items[i];
        let img = tape.constant(image.clone());
        let logits = state.bundle.seg.forward(&mut tape, &seg_vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        sup_terms.push(loss_sup(&mut tape, probs, gt)?);
        src_probs.push(tape.value(probs).clone());
    }
    let sup = batch_mean(&mut tape, &sup_terms)?;

    // Target terms: pseudo-label CE, distillation, adversarial — off one
    // forward pass per image.
    let mut unsup_terms = Vec::with_capacity(tgt_batch.len());
    let mut distil_terms = Vec::with_capacity(tgt_batch.len());
    let mut adv_terms = Vec::with_capacity(tgt_batch.len());
    let mut tgt_probs = Vec::with_capacity(tgt_batch.len());
    for &i in tgt_batch {
        let (image, _) = &target.items[i];
        let img = tape.constant(image.clone());
        let logits = state.bundle.seg.forward(&mut tape, &seg_vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        tgt_probs.push(tape.value(probs).clone());

        unsup_terms.push(loss_unsup(&mut tape, probs, &frozen_pseudo[i])?);

        let teachers_at_i: Vec<ProbMap<F>> = state
            .teacher_preds
            .iter()
            .map(|per_image| per_image[i].clone())
            .collect();
        distil_terms.push(loss_distil(&mut tape, probs, &teachers_at_i, weights)?);

        if cfg.lambda_adv > F::zero() {
            let d_out = disc.forward(&mut tape, &disc_vars, probs)?;
            adv_terms.push(loss_adv(&mut tape, d_out, cfg.gan_kind)?);
        }
    }
    let unsup = batch_mean(&mut tape, &unsup_terms)?;
    let distil = batch_mean(&mut tape, &distil_terms)?;
    let overall = loss_overall(&mut tape, sup, unsup, distil, &cfg.loss_weights)?;
    let (total, adv_value) = if adv_terms.is_empty() {
        (overall, 0.0)
    } else {
        let adv = batch_mean(&mut tape, &adv_terms)?;
        let weighted = tape.scale(adv, cfg.lambda_adv);
        (
            tape.add(overall, weighted)?,
            tape.value(adv).item().to_f64().unwrap(),
        )
    };

    let values = [
        tape.value(sup).item().to_f64().unwrap(),
        tape.value(unsup).item().to_f64().unwrap(),
        tape.value(distil).item().to_f64().unwrap(),
        adv_value,
    ];
    let grads = tape.backward(total)?;
    apply_grads(
        &tape,
        &grads,
        &seg_vars.vars(),
        state.bundle.seg.params_mut(),
        opt_seg,
    )?;

    // Discriminator step: only the best source's discriminator trains.
    let mut dtape = Tape::new();
    let disc = &state.bundle.discs[best];
    let dvars = disc.register(&mut dtape, true);
    let mut disc_terms = Vec::with_capacity(src_probs.len());
    for (ps, pt) in src_probs.into_iter().zip(tgt_probs) {
        let ps = dtape.constant(ps);
        let pt = dtape.constant(pt);
        let ds = disc.forward(&mut dtape, &dvars, ps)?;
        let dt = disc.forward(&mut dtape, &dvars, pt)?;
        disc_terms.push(loss_disc(&mut dtape, ds, dt, cfg.gan_kind)?);
    }
    let dloss = batch_mean(&mut dtape, &disc_terms)?;
    let disc_value = dtape.value(dloss).item().to_f64().unwrap();
    let dgrads = dtape.backward(dloss)?;
    apply_grads(
        &dtape,
        &dgrads,
        &dvars.vars(),
        state.bundle.discs[best].params_mut(),
        opt_disc,
    )?;

    Ok([values[0], values[1], values[2], values[3], disc_value])
}

/// Full pipeline: pretrain every source pair, initialize from the best
/// source, run alternating rounds until churn < epsilon or the round budget
/// is reached. Returns the final state and the y_Alt-Inc label maps.
pub fn run_altinc<F: Scalar>(
    sources: &[DomainDataset<F>],
    target: &DomainDataset<F>,
    cfg: &TrainConfig<F>,
) -> Result<(AltIncState<F>, Vec<LabelMap>)> {
    if sources.len() < 2 {
        return Err(Error::TooFewSources(sources.len()));
    }
    let pairs = pretrain_all(sources, target, cfg)?;
    let mut state = initialize_best_source(pairs, target, cfg)?;
    let best = state.best_source();
    loop {
        altinc_round(&mut state, &sources[best], target, cfg)?;
        let churn = state.history.last().expect("round recorded").churn;
        if churn < cfg.epsilon || state.round >= cfg.max_rounds {
            break;
        }
    }
    let labels = state.pseudo_label_maps();
    Ok((state, labels))
}

/// Optional post-boundless self-training pass: cross entropy on the
/// boundless labels (open-id pixels masked out, since the net predicts closed
/// classes only) plus `regularizer_weight` times cross entropy on the final
/// alternating-round labels. Returns the retrained net; the caller's model is
/// untouched.
pub fn retrain_on_boundless<F: Scalar>(
    seg: &SegNet<F>,
    target: &DomainDataset<F>,
    boundless_labels: &[LabelMap],
    altinc_labels: &[LabelMap],
    regularizer_weight: F,
    epochs: usize,
    cfg: &TrainConfig<F>,
) -> Result<SegNet<F>> {
    cfg.validate()?;
    if boundless_labels.len() != target.len() || altinc_labels.len() != target.len() {
        return Err(Error::ShapeMismatch {
            left: vec![boundless_labels.len(), altinc_labels.len()],
            right: vec![target.len()],
        });
    }
    let num_closed = target.num_closed as u8;
    let masked: Vec<LabelMap> = boundless_labels
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for row in 0..out.height() {
                for col in 0..out.width() {
                    if out.get(row, col) >= num_closed {
                        out.set(row, col, crate::maps::IGNORE_LABEL);
                    }
                }
            }
            out
        })
        .collect();

    let mut net = seg.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let steps_per_epoch = target.len().div_ceil(cfg.batch_size);
    for epoch in 0..epochs {
        let order = shuffled_indices(
            target.len(),
            cfg.seed,
            &format!("retrain/epoch{epoch}"),
        );
        for step in 0..steps_per_epoch {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|j| order[(step * cfg.batch_size + j) % target.len()])
                .collect();
            let mut tape = Tape::new();
            let vars = net.register(&mut tape, true);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (image, _) = &target.items[i];
                let img = tape.constant(image.clone());
                let logits = net.forward(&mut tape, &vars, img)?;
                let probs = tape.softmax_channels(logits)?;
                let main = loss_unsup(&mut tape, probs, &masked[i])?;
                let reg = loss_unsup(&mut tape, probs, &altinc_labels[i])?;
                let reg = tape.scale(reg, regularizer_weight);
                terms.push(tape.add(main, reg)?);
            }
            let loss = batch_mean(&mut tape, &terms)?;
            let grads = tape.backward(loss)?;
            apply_grads(&tape, &grads, &vars.vars(), net.params_mut(), &mut opt)?;
        }
    }
    Ok(net)
}

/// Largest label id (+1) to evaluate against, covering open-set ids present
/// in the target ground truth.
pub fn num_eval_classes<F: Scalar>(target: &DomainDataset<F>) -> usize {
    let open_max = target
        .open_ids
        .iter()
        .map(|&o| o as usize + 1)
        .max()
        .unwrap_or(0);
    target.num_closed.max(open_max)
}

fn shared_private_split<F: Scalar>(target: &DomainDataset<F>) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = num_eval_classes(target);
    let shared: Vec<usize> = (0..target.num_closed).collect();
    let private: Vec<usize> = (target.num_closed..n).collect();
    Some((shared, private))
}

/// Evaluates predicted label maps against the target ground truth.
pub fn evaluate_labels<F: Scalar>(
    predictions: &[LabelMap],
    target: &DomainDataset<F>,
) -> Result<EvalReport> {
    if predictions.len() != target.len() {
        return Err(Error::ShapeMismatch {
            left: vec![predictions.len()],
            right: vec![target.len()],
        });
    }
    let n = num_eval_classes(target);
    let mut m = ConfusionMatrix::new(n);
    for (pred, (_, gt)) in predictions.iter().zip(&target.items) {
        m.accumulate(pred, gt)?;
    }
    let (shared, private) = shared_private_split(target).expect("split");
    crate::metrics::iou_report(&m, &shared, &private)
}

/// Evaluates a segmentation net's argmax predictions on the target set.
pub fn evaluate_model<F: Scalar>(
    seg: &SegNet<F>,
    target: &DomainDataset<F>,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(target.len());
    for (image, _) in &target.items {
        let probs = seg.predict(image)?;
        preds.push(generate_pseudo_labels(&probs).labels);
    }
    evaluate_labels(&preds, target)
}
