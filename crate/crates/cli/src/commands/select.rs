//! `altinc select`: dissimilarity report and best-source selection.

use std::path::{Path, PathBuf};

use anyhow::Result;

use altinc_core::data_synth::DomainKind;
use altinc_core::models::ModelBundle;
use altinc_core::source_select::build_report;
use altinc_core::{Discriminator, Real, SegNet, Tensor};

use crate::config::RunConfig;
use crate::manifest::{require_stage, write_manifest};
use crate::rundir::{format_select_report, load_dataset};

/// Loads the pretrained (SegNet, Discriminator) pairs written by
/// `cmd_pretrain`.
pub fn load_pairs(run_dir: &Path, cfg: &RunConfig) -> Result<Vec<(SegNet, Discriminator)>> {
    let models_dir = require_stage(run_dir, "models", "pretrain")?;
    let mut pairs = Vec::with_capacity(cfg.num_sources);
    for i in 0..cfg.num_sources {
        let bundle = ModelBundle::<Real>::load_params(
            &models_dir.join(format!("source{i}.params")),
            cfg.num_closed(),
            1,
        )?;
        let disc = bundle.discs.into_iter().next().expect("one disc per pair");
        pairs.push((bundle.seg, disc));
    }
    Ok(pairs)
}

pub fn cmd_select(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data_root = require_stage(run_dir, "data", "gen")?;
    let pairs = load_pairs(run_dir, cfg)?;
    let target = load_dataset(&data_root, cfg, DomainKind::Target)?;
    let images: Vec<Tensor> = target.images().cloned().collect();
    let report = build_report(&pairs, &images, cfg.beta)?;

    let select_dir = run_dir.join("select");
    std::fs::create_dir_all(&select_dir)?;
    let text = format_select_report(&report);
    std::fs::write(select_dir.join("report.txt"), &text)?;
    write_manifest(&select_dir, &[PathBuf::from("report.txt")])?;
    print!("{text}");
    Ok(())
}
