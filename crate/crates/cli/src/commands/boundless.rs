//! `altinc boundless`: open-set relabeling of the final pseudo labels, by
//! confidence thresholding (default) or the KL-distance ablation variant.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use altinc_core::data_synth::DomainKind;
use altinc_core::io;
use altinc_core::models::ModelBundle;
use altinc_core::pseudo::{
    boundless_relabel, class_prototypes, generate_pseudo_labels, kl_similarity_relabel,
    resolve_tau,
};
use altinc_core::trainer::retrain_on_boundless;
use altinc_core::{LabelMap, ProbMap, PseudoLabels, Real};

use crate::config::RunConfig;
use crate::manifest::{require_stage, write_manifest};
use crate::rundir::{load_dataset, load_labels, save_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelabelMethod {
    Threshold,
    KlDivergence,
}

impl std::str::FromStr for RelabelMethod {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(RelabelMethod::Threshold),
            "kl" => Ok(RelabelMethod::KlDivergence),
            other => bail!("relabel method must be 'threshold' or 'kl', got {other:?}"),
        }
    }
}

pub fn cmd_boundless(run_dir: &Path, cfg: &RunConfig, method: RelabelMethod) -> Result<()> {
    let altinc_dir = require_stage(run_dir, "altinc", "altinc")?;
    let spec = cfg.open_set_spec()?;

    // Confidences come from the final model's probability maps.
    let probs_dir = altinc_dir.join("probs");
    let maps = load_probmaps(&probs_dir)?;
    let pseudo: Vec<PseudoLabels> = maps.iter().map(generate_pseudo_labels).collect();
    let taus = resolve_tau(&pseudo, cfg.num_closed(), cfg.tau_fraction)?;

    let relabeled: Vec<LabelMap> = match method {
        RelabelMethod::Threshold => pseudo
            .iter()
            .map(|p| boundless_relabel(p, &spec, &taus))
            .collect::<altinc_core::Result<_>>()?,
        RelabelMethod::KlDivergence => {
            let prototypes = class_prototypes(&maps, &pseudo, cfg.num_closed(), &taus)?;
            maps.iter()
                .map(|m| kl_similarity_relabel(m, &spec, &prototypes, cfg.kl_kappa))
                .collect::<altinc_core::Result<_>>()?
        }
    };

    let out_dir = run_dir.join("boundless");
    fs::create_dir_all(&out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();

    let mut taus_text = String::from("# per-class thresholds (fraction of max class confidence)\n");
    taus_text.push_str(&format!("method {}\n", match method {
        RelabelMethod::Threshold => "threshold",
        RelabelMethod::KlDivergence => "kl",
    }));
    taus_text.push_str(&format!("tau_fraction {}\n", cfg.tau_fraction));
    for (class, tau) in taus.iter().enumerate() {
        match tau {
            Some(t) => taus_text.push_str(&format!("tau {class} {t}\n")),
            None => taus_text.push_str(&format!("tau {class} NA\n")),
        }
    }
    let relabeled_pixels: usize = relabeled
        .iter()
        .zip(&pseudo)
        .map(|(after, before)| {
            after
                .labels()
                .iter()
                .zip(before.labels.labels())
                .filter(|(a, b)| a != b)
                .count()
        })
        .sum();
    taus_text.push_str(&format!("relabeled_pixels {relabeled_pixels}\n"));
    fs::write(out_dir.join("taus.txt"), &taus_text)?;
    written.push(PathBuf::from("taus.txt"));

    written.extend(
        save_labels(&out_dir.join("labels"), &relabeled)?
            .into_iter()
            .map(|r| PathBuf::from("labels").join(r)),
    );
    println!("boundless: relabeled {relabeled_pixels} pixels across {} maps", relabeled.len());

    if cfg.retrain_after_boundless {
        let data_root = require_stage(run_dir, "data", "gen")?;
        let target = load_dataset(&data_root, cfg, DomainKind::Target)?;
        let bundle = ModelBundle::<Real>::load_params(
            &altinc_dir.join("final.params"),
            cfg.num_closed(),
            cfg.num_sources,
        )?;
        let altinc_labels = load_labels(&altinc_dir.join("labels"))?;
        let retrained = retrain_on_boundless(
            &bundle.seg,
            &target,
            &relabeled,
            &altinc_labels,
            cfg.retrain_weight,
            cfg.retrain_epochs,
            &cfg.train_config(),
        )?;
        let rel = PathBuf::from("retrained.params");
        ModelBundle::new(retrained, vec![]).save_params(&out_dir.join(&rel))?;
        written.push(rel);
        println!("boundless: retrained model written (retrain_after_boundless = true)");
    }

    write_manifest(&out_dir, &written)?;
    Ok(())
}

fn load_probmaps(dir: &Path) -> Result<Vec<ProbMap>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".probmap")) {
            found.push((stem.parse::<usize>()?, name));
        }
    }
    found.sort_unstable();
    if found.is_empty() {
        bail!("no probability maps in {}", dir.display());
    }
    found
        .into_iter()
        .map(|(_, name)| io::load_probmap(&dir.join(name)).map_err(Into::into))
        .collect()
}
