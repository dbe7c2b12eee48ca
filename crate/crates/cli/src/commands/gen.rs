//! `altinc gen`: procedural dataset generation.

use std::path::Path;

use anyhow::Result;

use altinc_core::data_synth::{generate_domain, inject_open_set, DomainKind};
use altinc_core::Real;

use crate::config::RunConfig;
use crate::manifest::write_manifest;
use crate::rundir::{ensure_config, save_dataset};

pub fn cmd_gen(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_config(run_dir, cfg)?;
    let data_root = run_dir.join("data");
    std::fs::create_dir_all(&data_root)?;

    let mut written = Vec::new();
    for i in 0..cfg.num_sources {
        let kind = DomainKind::Source(i);
        let ds = generate_domain::<Real>(&cfg.scene_config(kind), cfg.images_per_source, kind)?;
        written.extend(save_dataset(&data_root, &ds)?);
        log::info!("generated {} images for source {i}", ds.len());
    }

    let scene = cfg.scene_config(DomainKind::Target);
    let target = generate_domain::<Real>(&scene, cfg.target_images, DomainKind::Target)?;
    let target = if cfg.open_inject_prob > 0.0 {
        inject_open_set(target, &scene)?
    } else {
        target
    };
    written.extend(save_dataset(&data_root, &target)?);
    log::info!(
        "generated {} target images (open ids: {:?})",
        target.len(),
        target.open_ids
    );

    write_manifest(&data_root, &written)?;
    println!(
        "gen: {} source domains x {} images, {} target images -> {}",
        cfg.num_sources,
        cfg.images_per_source,
        cfg.target_images,
        data_root.display()
    );
    Ok(())
}
