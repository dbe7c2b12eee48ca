//! `altinc eval`: compares a label dump against the target ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use altinc_core::data_synth::DomainKind;
use altinc_core::metrics::{iou_report, ConfusionMatrix, EvalReport};
use altinc_core::trainer::num_eval_classes;

use crate::config::RunConfig;
use crate::manifest::{require_stage, write_manifest};
use crate::rundir::{load_dataset, load_labels};

const CLASS_NAMES: [&str; 5] = ["road", "sky", "terrain", "vehicle", "building"];

fn class_name(id: usize, num_closed: usize) -> String {
    if id < CLASS_NAMES.len().min(num_closed) {
        CLASS_NAMES[id].into()
    } else if id >= num_closed {
        format!("open{id}")
    } else {
        format!("class{id}")
    }
}

pub fn cmd_eval(run_dir: &Path, cfg: &RunConfig, labels_dir: Option<&Path>) -> Result<()> {
    let data_root = require_stage(run_dir, "data", "gen")?;
    let target = load_dataset(&data_root, cfg, DomainKind::Target)?;

    // Default to the boundless output when present, else the final
    // alternating-round labels.
    let labels_dir = match labels_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let boundless = run_dir.join("boundless/labels");
            if boundless.is_dir() {
                boundless
            } else {
                run_dir.join("altinc/labels")
            }
        }
    };
    let predictions = load_labels(&labels_dir)?;
    if predictions.len() != target.len() {
        bail!(
            "{} predictions vs {} target images",
            predictions.len(),
            target.len()
        );
    }

    // Cover open ids appearing on either side.
    let pred_max = predictions
        .iter()
        .flat_map(|m| m.labels().iter())
        .filter(|&&l| l != altinc_core::IGNORE_LABEL)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let n = num_eval_classes(&target).max(pred_max);
    let mut m = ConfusionMatrix::new(n);
    for (pred, (_, gt)) in predictions.iter().zip(&target.items) {
        m.accumulate(pred, gt)?;
    }
    let shared: Vec<usize> = (0..target.num_closed).collect();
    let private: Vec<usize> = (target.num_closed..n).collect();
    let report = iou_report(&m, &shared, &private)?;

    let text = render_report(&report, target.num_closed, &labels_dir);
    print!("{text}");
    let eval_dir = run_dir.join("eval");
    fs::create_dir_all(&eval_dir)?;
    fs::write(eval_dir.join("report.txt"), &text)?;
    write_manifest(&eval_dir, &[PathBuf::from("report.txt")])?;
    Ok(())
}

/// Aligned table plus line-delimited records (one per class, then summary
/// lines).
pub fn render_report(report: &EvalReport, num_closed: usize, labels_dir: &Path) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# evaluation of {}", labels_dir.display());
    let _ = writeln!(out, "{:<5} {:<10} {:>8}  {}", "class", "name", "iou%", "split");
    for (id, iou) in report.per_class_iou.iter().enumerate() {
        let split = if report.shared.contains(&id) { "shared" } else { "private" };
        match iou {
            Some(v) => {
                let _ = writeln!(
                    out,
                    "{:<5} {:<10} {:>8.2}  {}",
                    id,
                    class_name(id, num_closed),
                    v * 100.0,
                    split
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{:<5} {:<10} {:>8}  {} (absent: excluded from means)",
                    id,
                    class_name(id, num_closed),
                    "--",
                    split
                );
            }
        }
    }
    let fmt_pct = |v: Option<f64>| match v {
        Some(v) => format!("{}", v * 100.0),
        None => "NA".into(),
    };
    for (id, iou) in report.per_class_iou.iter().enumerate() {
        let _ = writeln!(
            out,
            "class={id} name={} iou={}",
            class_name(id, num_closed),
            match iou {
                Some(v) => v.to_string(),
                None => "NA".into(),
            }
        );
    }
    let _ = writeln!(out, "miou_shared_pct={}", fmt_pct(report.miou_shared));
    let _ = writeln!(out, "miou_private_pct={}", fmt_pct(report.miou_private));
    let _ = writeln!(out, "accuracy_pct={}", report.accuracy * 100.0);
    out
}
