//! Stage manifests: sorted `sha256  relative-path` lines.
//!
//! Each completed stage writes a manifest of every file it produced. Later
//! stages check for the manifest to enforce ordering, and identical reruns
//! produce byte-identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes `files` (relative to `root`) and writes `root/manifest.txt`.
pub fn write_manifest(root: &Path, files: &[PathBuf]) -> Result<()> {
    let mut lines = Vec::with_capacity(files.len());
    for rel in files {
        let hash = sha256_hex(&root.join(rel))?;
        lines.push(format!("{hash}  {}", rel.display()));
    }
    lines.sort();
    fs::write(root.join("manifest.txt"), lines.join("\n") + "\n")
        .with_context(|| format!("writing manifest in {}", root.display()))?;
    Ok(())
}

/// Fails with a stage-naming error when a prerequisite stage has not run.
pub fn require_stage(run_dir: &Path, stage_dir: &str, stage_cmd: &str) -> Result<PathBuf> {
    let dir = run_dir.join(stage_dir);
    if !dir.join("manifest.txt").is_file() {
        bail!(
            "{stage_cmd} artifacts missing: run `altinc {stage_cmd}` on this run directory first"
        );
    }
    Ok(dir)
}
