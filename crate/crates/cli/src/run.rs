//! Run directory bookkeeping. `run_manifest.json` records the config hash,
//! the seeds and, per stage, every artifact written with its sha256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, PipelineConfig};
use crate::error::{io_err, parse_err, CliError, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub config: PipelineConfig,
    /// Stage name to the artifacts it wrote, relative to the run directory.
    pub stages: BTreeMap<String, Vec<String>>,
    /// Artifact path to sha256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Opens (or starts) the run in `config.output_dir`. A directory that
    /// already holds a run with a different configuration is refused.
    pub fn open(config: &PipelineConfig) -> Result<Self> {
        let root = config.output_dir.clone();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let hash = config.hash();
        let path = root.join(RUN_MANIFEST);
        let manifest = if path.is_file() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let existing: RunManifest = serde_json::from_str(&text).map_err(|e| parse_err(&path)(e.to_string()))?;
            if existing.config_hash != hash {
                return Err(CliError::RunConflict { dir: root, found: existing.config_hash, expected: hash });
            }
            existing
        } else {
            RunManifest {
                version: RUN_MANIFEST_VERSION,
                config_hash: hash,
                master_seed: config.seed,
                stage_seeds: config.stage_seeds(),
                config: config.resolved(),
                stages: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            }
        };
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.manifest.stages.contains_key(stage)
    }

    pub fn require(&self, stage: &'static str, needs: &'static str) -> Result<()> {
        if self.has_stage(needs) {
            Ok(())
        } else {
            Err(CliError::StageMissing { stage, needs, dir: self.root.clone() })
        }
    }

    /// Replaces the artifact list of `stage` and rewrites the manifest.
    pub fn record(&mut self, stage: &str, files: &[PathBuf]) -> Result<()> {
        if let Some(old) = self.manifest.stages.remove(stage) {
            for f in old {
                self.manifest.artifacts.remove(&f);
            }
        }
        let mut rels = Vec::with_capacity(files.len());
        for f in files {
            let bytes = fs::read(f).map_err(io_err(f))?;
            let rel = f
                .strip_prefix(&self.root)
                .unwrap_or(f)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            self.manifest.artifacts.insert(rel.clone(), sha256_hex(&bytes));
            rels.push(rel);
        }
        rels.sort();
        rels.dedup();
        self.manifest.stages.insert(stage.to_string(), rels);
        self.save()
    }

    fn save(&self) -> Result<()> {
        let path = self.root.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_artifacts_and_refuses_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { output_dir: dir.path().join("run"), seed: 5, ..Default::default() };
        let mut run = RunDir::open(&cfg).unwrap();
        let a = run.path("a.txt");
        fs::write(&a, "hello").unwrap();
        run.record("generate", &[a.clone()]).unwrap();
        assert!(run.has_stage("generate"));
        assert!(run.require("split", "train-factor").is_err());

        let again = RunDir::open(&cfg).unwrap();
        assert_eq!(again.manifest().stages["generate"], vec!["a.txt".to_string()]);
        assert_eq!(again.manifest().artifacts["a.txt"], sha256_hex(b"hello"));

        let other = PipelineConfig { seed: 6, ..cfg };
        let err = RunDir::open(&other).unwrap_err();
        assert_eq!(err.code(), "RUN_CONFLICT");
    }
}
