//! `altinc altinc`: the alternating-incremental training rounds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use altinc_core::data_synth::DomainKind;
use altinc_core::io;
use altinc_core::trainer::{altinc_round, initialize_best_source};
use altinc_core::Real;

use crate::config::RunConfig;
use crate::manifest::{require_stage, write_manifest};
use crate::rundir::{
    format_round_record, load_dataset, parse_select_report, save_labels,
};

pub fn cmd_altinc(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data_root = require_stage(run_dir, "data", "gen")?;
    let select_dir = require_stage(run_dir, "select", "select")?;
    let pairs = super::select::load_pairs(run_dir, cfg)?;

    let target = load_dataset(&data_root, cfg, DomainKind::Target)?;
    let train_cfg = cfg.train_config();
    let stored_report = parse_select_report(&fs::read_to_string(select_dir.join("report.txt"))?)?;

    let mut state = initialize_best_source(pairs, &target, &train_cfg)?;
    if state.report.best_source != stored_report.best_source {
        bail!(
            "select stage chose source {} but initialization now computes {}; \
             stale artifacts in the run directory",
            stored_report.best_source,
            state.report.best_source
        );
    }
    let best = state.best_source();
    let best_source = load_dataset(&data_root, cfg, DomainKind::Source(best))?;
    println!("altinc: best source is {best}");

    let out_dir = run_dir.join("altinc");
    fs::create_dir_all(&out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();

    // Round-0 pseudo labels (from the best-source model) are dumped too.
    written.extend(prefixed(
        save_labels(&out_dir.join("pseudo_round00"), &state.pseudo_label_maps())?,
        "pseudo_round00",
    ));

    let mut metrics = String::new();
    loop {
        altinc_round(&mut state, &best_source, &target, &train_cfg)?;
        let record = state.history.last().expect("round recorded");
        let line = format_round_record(record);
        println!("altinc: {line}");
        metrics.push_str(&line);
        metrics.push('\n');

        let round = state.round;
        let ckpt_rel = PathBuf::from(format!("round{round:02}.params"));
        state.bundle.save_params(&out_dir.join(&ckpt_rel))?;
        written.push(ckpt_rel);
        let pseudo_dir = format!("pseudo_round{round:02}");
        written.extend(prefixed(
            save_labels(&out_dir.join(&pseudo_dir), &state.pseudo_label_maps())?,
            &pseudo_dir,
        ));

        if record.churn < train_cfg.epsilon || state.round >= train_cfg.max_rounds {
            break;
        }
    }

    fs::write(out_dir.join("metrics.txt"), &metrics)?;
    written.push(PathBuf::from("metrics.txt"));

    let final_rel = PathBuf::from("final.params");
    state.bundle.save_params(&out_dir.join(&final_rel))?;
    written.push(final_rel);

    // Final y_Alt-Inc labels plus the probability maps boundless relabeling
    // reads its confidences from.
    written.extend(prefixed(
        save_labels(&out_dir.join("labels"), &state.pseudo_label_maps())?,
        "labels",
    ));
    let probs_dir = out_dir.join("probs");
    fs::create_dir_all(&probs_dir)?;
    for (i, (image, _)) in target.items.iter().enumerate() {
        let probs = state.bundle.seg.predict(image)?;
        let rel = PathBuf::from("probs").join(format!("img_{i:05}.probmap"));
        io::save_probmap::<Real>(&out_dir.join(&rel), &probs)?;
        written.push(rel);
    }

    write_manifest(&out_dir, &written)?;
    Ok(())
}

fn prefixed(rels: Vec<PathBuf>, dir: &str) -> Vec<PathBuf> {
    rels.into_iter().map(|r| PathBuf::from(dir).join(r)).collect()
}
