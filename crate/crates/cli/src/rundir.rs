//! Run-directory layout and stage artifact helpers.
//!
//! ```text
//! run/
//!   config.txt            resolved configuration (written by gen)
//!   data/<domain>/        img_NNNNN.ten + lbl_NNNNN.pgm per image
//!   models/sourceN.params pretrained (SegNet, Discriminator) pairs
//!   select/report.txt     dissimilarity report
//!   altinc/               checkpoints, pseudo dumps, metrics, final labels
//!   boundless/            relabeled maps, thresholds
//!   eval/report.txt       evaluation table + records
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use altinc_core::data_synth::{DomainDataset, DomainKind};
use altinc_core::io;
use altinc_core::maps::LabelMap;
use altinc_core::trainer::RoundRecord;
use altinc_core::{DissimilarityReport, Error, Real, Tensor};

use crate::config::RunConfig;

/// Creates the run directory and echoes the resolved config. An existing
/// config that differs is an error: one run directory, one configuration.
pub fn ensure_config(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run dir {}", run_dir.display()))?;
    let path = run_dir.join("config.txt");
    let echo = cfg.echo();
    if path.is_file() {
        let existing = fs::read_to_string(&path)?;
        if existing != echo {
            bail!(
                "run directory {} was created with a different configuration; \
                 use a fresh directory or the original config",
                run_dir.display()
            );
        }
        return Ok(());
    }
    fs::write(&path, echo).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads the configuration a run directory was created with.
pub fn stored_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join("config.txt");
    if !path.is_file() {
        bail!(
            "no config.txt in {}: run `altinc gen` first or pass --config",
            run_dir.display()
        );
    }
    let text = fs::read_to_string(&path)?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

// ── dataset dumps ────────────────────────────────────────────────────────

pub fn domain_dir_name(kind: DomainKind) -> String {
    kind.stream_name()
}

/// Writes one domain's images and labels; returns the relative paths written
/// (relative to the data root).
pub fn save_dataset(data_root: &Path, ds: &DomainDataset<Real>) -> Result<Vec<PathBuf>> {
    let sub = domain_dir_name(ds.kind);
    let dir = data_root.join(&sub);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(ds.len() * 2);
    for (i, (image, gt)) in ds.items.iter().enumerate() {
        let img_rel = PathBuf::from(&sub).join(format!("img_{i:05}.ten"));
        let lbl_rel = PathBuf::from(&sub).join(format!("lbl_{i:05}.pgm"));
        io::save_tensor(&data_root.join(&img_rel), "image", image)?;
        io::save_pgm(&data_root.join(&lbl_rel), gt)?;
        written.push(img_rel);
        written.push(lbl_rel);
    }
    Ok(written)
}

/// Reads one domain back from its dump directory. A source domain with a
/// missing label file is an unlabeled-source error; targets require labels
/// too since the toy pipeline evaluates against them.
pub fn load_dataset(
    data_root: &Path,
    cfg: &RunConfig,
    kind: DomainKind,
) -> Result<DomainDataset<Real>> {
    let dir = data_root.join(domain_dir_name(kind));
    let mut indices = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".ten")) {
            indices.push(stem.parse::<usize>().with_context(|| format!("bad dump name {name}"))?);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        bail!("no images in {}", dir.display());
    }

    let mut items = Vec::with_capacity(indices.len());
    let mut open_ids: Vec<u8> = Vec::new();
    let num_closed = cfg.num_closed();
    for i in indices {
        let (_, image): (String, Tensor) = io::load_tensor(&dir.join(format!("img_{i:05}.ten")))?;
        let lbl_path = dir.join(format!("lbl_{i:05}.pgm"));
        if !lbl_path.is_file() {
            if matches!(kind, DomainKind::Source(_)) {
                return Err(Error::UnlabeledSource.into());
            }
            bail!("missing label dump {}", lbl_path.display());
        }
        let gt = io::load_pgm(&lbl_path)?;
        for &l in gt.labels() {
            if l != altinc_core::IGNORE_LABEL && (l as usize) >= num_closed && !open_ids.contains(&l)
            {
                if matches!(kind, DomainKind::Source(_)) {
                    bail!("source dump contains open-set label {l}");
                }
                open_ids.push(l);
            }
        }
        items.push((image, gt));
    }
    open_ids.sort_unstable();
    Ok(DomainDataset {
        items,
        kind,
        num_closed,
        open_ids,
    })
}

/// Writes label maps as `img_NNNNN.pgm`; returns relative paths.
pub fn save_labels(dir: &Path, labels: &[LabelMap]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(labels.len());
    for (i, map) in labels.iter().enumerate() {
        let rel = PathBuf::from(format!("img_{i:05}.pgm"));
        io::save_pgm(&dir.join(&rel), map)?;
        written.push(rel);
    }
    Ok(written)
}

/// Reads every `img_NNNNN.pgm` in a dump directory, ordered by index.
pub fn load_labels(dir: &Path) -> Result<Vec<LabelMap>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".pgm")) {
            found.push((stem.parse::<usize>()?, name));
        }
    }
    found.sort_unstable();
    if found.is_empty() {
        bail!("no label maps in {}", dir.display());
    }
    found
        .into_iter()
        .map(|(_, name)| io::load_pgm(&dir.join(name)).map_err(Into::into))
        .collect()
}

// ── reports ──────────────────────────────────────────────────────────────

pub fn format_select_report(report: &DissimilarityReport) -> String {
    let mut out = String::from("# dissimilarity report (source=1 / target=0 convention)\n");
    out.push_str(&format!("num_target_images {}\n", report.num_target_images));
    for (i, d) in report.dissimilarity.iter().enumerate() {
        out.push_str(&format!("dissimilarity {i} {d}\n"));
    }
    out.push_str(&format!("best_source {}\n", report.best_source));
    for (i, w) in &report.weights {
        out.push_str(&format!("weight {i} {w}\n"));
    }
    out
}

pub fn parse_select_report(text: &str) -> Result<DissimilarityReport> {
    let mut num_target_images = None;
    let mut dissimilarity = Vec::new();
    let mut best = None;
    let mut weights = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["num_target_images", n] => num_target_images = Some(n.parse()?),
            ["dissimilarity", i, d] => {
                let i: usize = i.parse()?;
                if i != dissimilarity.len() {
                    bail!("dissimilarity entries out of order");
                }
                dissimilarity.push(d.parse()?);
            }
            ["best_source", b] => best = Some(b.parse()?),
            ["weight", i, w] => weights.push((i.parse()?, w.parse()?)),
            other => bail!("unrecognized report line {other:?}"),
        }
    }
    Ok(DissimilarityReport {
        dissimilarity,
        best_source: best.ok_or_else(|| anyhow!("report missing best_source"))?,
        weights,
        num_target_images: num_target_images.ok_or_else(|| anyhow!("report missing num_target_images"))?,
    })
}

/// One metrics line per round: space-separated key=value pairs.
pub fn format_round_record(r: &RoundRecord) -> String {
    let miou = match r.miou_shared {
        Some(v) => v.to_string(),
        None => "NA".into(),
    };
    format!(
        "round={} churn={} loss_sup={} loss_unsup={} loss_distil={} loss_adv={} loss_disc={} miou_shared={}",
        r.round, r.churn, r.mean_sup, r.mean_unsup, r.mean_distil, r.mean_adv, r.mean_disc, miou
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_report_roundtrip() {
        let report = DissimilarityReport {
            dissimilarity: vec![0.4, 0.125, 0.3],
            best_source: 1,
            weights: vec![(0, 0.25), (2, 0.75)],
            num_target_images: 40,
        };
        let text = format_select_report(&report);
        let back = parse_select_report(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let scene = cfg.scene_config(DomainKind::Source(0));
        let ds = altinc_core::data_synth::generate_domain::<Real>(&scene, 3, DomainKind::Source(0))
            .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path(), &cfg, DomainKind::Source(0)).unwrap();
        assert_eq!(back.len(), 3);
        for ((ia, ga), (ib, gb)) in ds.items.iter().zip(&back.items) {
            assert_eq!(ia, ib);
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn unlabeled_source_detected() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let scene = cfg.scene_config(DomainKind::Source(0));
        let ds = altinc_core::data_synth::generate_domain::<Real>(&scene, 2, DomainKind::Source(0))
            .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("source0/lbl_00001.pgm")).unwrap();
        let err = load_dataset(dir.path(), &cfg, DomainKind::Source(0)).unwrap_err();
        assert!(err.to_string().contains("no labels"), "{err}");
    }
}
