//! Output directories: the fixed run layout and atomic promotion of staged
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dubflow::corpus::{load_corpus, StoredCorpus};
use dubflow::types::CorpusSample;

use crate::config::{RunConfig, RESOLVED_CONFIG};

pub const CHECKPOINT: &str = "checkpoint";
pub const LOGS: &str = "logs";
pub const REPORTS: &str = "reports";
pub const RENDERS: &str = "renders";

/// Sibling path where `target` is assembled before promotion.
pub fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    target.with_file_name(format!("{name}.partial"))
}

pub fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// A fresh staging directory for `target`. An existing non-empty target is
/// refused unless `overwrite` is set.
pub fn begin(target: &Path, overwrite: bool) -> Result<PathBuf> {
    if target.exists() && !target.is_dir() {
        bail!("{} exists and is not a directory", target.display());
    }
    if is_non_empty_dir(target) && !overwrite {
        bail!(
            "refusing to write into non-empty directory {} (pass --overwrite to replace it)",
            target.display()
        );
    }
    let staging = staging_path(target);
    if staging.exists() {
        fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
    }
    fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    Ok(staging)
}

/// Replaces `target` with the finished staging directory.
pub fn promote(staging: &Path, target: &Path) -> Result<()> {
    if target.exists() {
        fs::remove_dir_all(target).with_context(|| format!("removing {}", target.display()))?;
    }
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::rename(staging, target)
        .with_context(|| format!("promoting {} to {}", staging.display(), target.display()))
}

pub fn create_layout(run: &Path) -> Result<()> {
    for sub in [CHECKPOINT, LOGS, REPORTS, RENDERS] {
        fs::create_dir_all(run.join(sub)).with_context(|| format!("creating {}", run.join(sub).display()))?;
    }
    Ok(())
}

pub fn write_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_text(&dir.join(RESOLVED_CONFIG), &config.to_toml()?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    dubflow::store::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// The resolved configuration a run directory was trained with.
pub fn run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(RESOLVED_CONFIG);
    if !path.is_file() {
        bail!("{} has no {RESOLVED_CONFIG}; is it a run directory?", run.display());
    }
    RunConfig::read(&path)
}

/// Loads a corpus and compares its generating configuration with the run
/// configuration. A mismatch is a warning, or an error when `strict`.
pub fn open_corpus(dir: &Path, config: &RunConfig, strict: bool) -> Result<StoredCorpus> {
    let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    let expected = config.corpus.config.hash()?;
    let mut problems = Vec::new();
    if corpus.manifest.config_hash != expected {
        problems.push(format!(
            "corpus config hash {} differs from run config hash {expected}",
            corpus.manifest.config_hash
        ));
    }
    if corpus.manifest.count != config.corpus.count {
        problems.push(format!(
            "corpus has {} samples, run config says {}",
            corpus.manifest.count, config.corpus.count
        ));
    }
    for p in problems {
        if strict {
            bail!("{p} (strict mode)");
        }
        log::warn!("{p}");
    }
    Ok(corpus)
}

pub fn pick<'a>(samples: &'a [CorpusSample], indices: &[usize]) -> Vec<&'a CorpusSample> {
    indices.iter().map(|&i| &samples[i]).collect()
}
