//! Experiment plumbing: datasets, JSON configs, JSONL run logs, recipe
//! fan-out and report tables.
//!
//! A run directory holds `config.resolved.json`, `runlog.jsonl`, an
//! `artifacts/` tree and `manifest.json` with sha256 digests of every file.

mod commands;
mod config;
mod data;
mod recipes;
mod report;
mod runlog;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commands::{cmd_bound, cmd_cs, cmd_hessian, cmd_imp, cmd_slice, cmd_train};
pub use config::{
    CsSettings, DataConfig, ExperimentConfig, IdxConfig, ModelConfig, PruneSettings, RecipeName, SweepConfig,
};
pub use data::{inject_label_noise, load_idx, make_blobs, parse_idx_images, parse_idx_labels, BlobSpec, Dataset};
pub use recipes::{param_quantiles, run_recipe, Quantile};
pub use report::{report, write_event_csv};
pub use runlog::{read_jsonl, save_jsonl, write_jsonl, Record, RUNLOG_SCHEMA_VERSION};

use crate::artifact::{digest_file, FileDigest};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACTS_DIR: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub seeds: Vec<u64>,
    pub jobs: Vec<String>,
    pub provenance: String,
    pub files: Vec<FileDigest>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<Record>,
    pub manifest: RunManifest,
}

/// A fresh output directory for one command.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Fails if `root` exists and is not empty.
    pub fn create(root: &Path) -> Result<Self> {
        if root.exists() && std::fs::read_dir(root)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                root.display()
            )));
        }
        std::fs::create_dir_all(root.join(ARTIFACTS_DIR))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifacts(&self, job: &str) -> Result<PathBuf> {
        let p = self.root.join(ARTIFACTS_DIR).join(job);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Writes the resolved config, the run log and the digest manifest.
    pub fn finish(
        self,
        cfg: &ExperimentConfig,
        command: &str,
        provenance: &str,
        records: Vec<Record>,
    ) -> Result<RunSummary> {
        std::fs::write(self.root.join(CONFIG_FILE), cfg.resolved_json()?)?;
        save_jsonl(&self.root.join(RUNLOG_FILE), &records)?;
        let mut files = Vec::new();
        collect_files(&self.root, Path::new(""), &mut files)?;
        files.sort();
        let mut jobs: Vec<String> = Vec::new();
        for r in &records {
            if !jobs.contains(&r.job) {
                jobs.push(r.job.clone());
            }
        }
        let manifest = RunManifest {
            schema_version: RUNLOG_SCHEMA_VERSION,
            command: command.to_string(),
            seeds: cfg.seeds.clone(),
            jobs,
            provenance: provenance.to_string(),
            files: files
                .iter()
                .map(|rel| digest_file(&self.root, rel))
                .collect::<Result<_>>()?,
        };
        std::fs::write(
            self.root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(RunSummary {
            dir: self.root,
            records,
            manifest,
        })
    }
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(root.join(rel))? {
        let entry = entry?;
        let name = rel.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            collect_files(root, &name, out)?;
        } else if name != Path::new(MANIFEST_FILE) {
            out.push(name.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Serde name of a unit enum value, e.g. `"spike_slab"`.
pub(crate) fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::from("?"),
    }
}

/// Jobs run on a pool of `jobs` threads; results keep job order.
pub(crate) fn fan_out<J, F>(items: &[J], jobs: usize, f: F) -> Result<Vec<Record>>
where
    J: Sync,
    F: Fn(&J) -> Result<Vec<Record>> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let parts: Vec<Vec<Record>> = pool.install(|| items.par_iter().map(&f).collect::<Result<_>>())?;
    Ok(parts.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests;
