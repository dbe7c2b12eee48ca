//! `altinc pretrain`: adversarial single-source DA pretraining, one
//! (SegNet, Discriminator) pair per source.

use std::path::{Path, PathBuf};

use anyhow::Result;

use altinc_core::data_synth::DomainKind;
use altinc_core::models::ModelBundle;
use altinc_core::trainer::pretrain_single_source;

use crate::config::RunConfig;
use crate::manifest::{require_stage, write_manifest};
use crate::rundir::load_dataset;

pub fn cmd_pretrain(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data_root = require_stage(run_dir, "data", "gen")?;
    let target = load_dataset(&data_root, cfg, DomainKind::Target)?;
    let train_cfg = cfg.train_config();

    let models_dir = run_dir.join("models");
    std::fs::create_dir_all(&models_dir)?;
    let mut written = Vec::new();
    for i in 0..cfg.num_sources {
        let source = load_dataset(&data_root, cfg, DomainKind::Source(i))?;
        let (seg, disc) = pretrain_single_source(&source, &target, &train_cfg, i)?;
        let bundle = ModelBundle::new(seg, vec![disc]);
        let rel = PathBuf::from(format!("source{i}.params"));
        bundle.save_params(&models_dir.join(&rel))?;
        written.push(rel);
        println!("pretrain: source {i} done");
    }
    write_manifest(&models_dir, &written)?;
    Ok(())
}
