//! Run directory layout, stage manifests and the read guard.
//!
//! Every read of a stage input goes through [`Run::read`] or
//! [`Run::access`], which log the access and refuse the ground-truth file to
//! every stage except evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use deepatrophy_core::synth::TRUTH_FILE;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Stage};
use crate::error::{CliError, Result};

pub const STAGE_FILE: &str = "stage.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Output file (relative to the stage directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub elapsed_seconds: f64,
}

/// One resolved run: its configuration, where it lives, and the access log.
#[derive(Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    /// Sweep variants keep their own train, score and eval directories under
    /// `sweep/<tag>` and share synthesis and preprocessing with the main run.
    pub variant: Option<String>,
    reads: Mutex<Vec<(Stage, PathBuf)>>,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let root = cfg.out.clone();
        Self {
            cfg,
            root,
            variant: None,
            reads: Mutex::new(Vec::new()),
        }
    }

    pub fn variant(cfg: ExperimentConfig, tag: &str) -> Self {
        let mut run = Self::new(cfg);
        run.variant = Some(tag.to_string());
        run
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        match (&self.variant, stage) {
            (Some(tag), Stage::Train | Stage::Score | Stage::Eval) => {
                self.root.join("sweep").join(tag).join(stage.name())
            }
            _ => self.root.join(stage.name()),
        }
    }

    pub fn path(&self, stage: Stage, rel: &str) -> PathBuf {
        self.stage_dir(stage).join(rel)
    }

    /// Directory holding this run's resolved config.
    pub fn config_dir(&self) -> PathBuf {
        match &self.variant {
            Some(tag) => self.root.join("sweep").join(tag),
            None => self.root.clone(),
        }
    }

    /// Creates the stage directory and records the resolved config.
    pub fn prepare(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let cfg_path = self.config_dir().join(CONFIG_FILE);
        fs::write(&cfg_path, self.cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;
        Ok(dir)
    }

    /// Checks the access policy for `reader` and logs the access.
    pub fn access<'a>(&self, reader: Stage, path: &'a Path) -> Result<&'a Path> {
        if reader != Stage::Eval && path.file_name().is_some_and(|n| n == TRUTH_FILE) {
            return Err(CliError::Policy(format!(
                "stage `{}` may not read the ground-truth file {}",
                reader.name(),
                path.display()
            )));
        }
        self.reads.lock().expect("read log").push((reader, path.to_path_buf()));
        Ok(path)
    }

    pub fn read(&self, reader: Stage, path: &Path) -> Result<Vec<u8>> {
        let p = self.access(reader, path)?;
        fs::read(p).map_err(|e| CliError::io(p, e))
    }

    pub fn read_string(&self, reader: Stage, path: &Path) -> Result<String> {
        let bytes = self.read(reader, path)?;
        String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, reader: Stage, path: &Path) -> Result<T> {
        let bytes = self.read(reader, path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Every `(reader, path)` access so far.
    pub fn read_log(&self) -> Vec<(Stage, PathBuf)> {
        self.reads.lock().expect("read log").clone()
    }

    /// Verifies that `upstream` completed under the current configuration
    /// and that its listed outputs are intact.
    pub fn require(&self, reader: Stage, upstream: Stage) -> Result<StageManifest> {
        let path = self.path(upstream, STAGE_FILE);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                stage: reader.name(),
                artifact: path,
                producer: upstream.name(),
            });
        }
        let manifest: StageManifest = self.read_json(reader, &path)?;
        let expected = self.cfg.stage_hash(upstream);
        if manifest.config_hash != expected {
            return Err(CliError::Stale(format!(
                "`{}` outputs in {} were produced by a different configuration; rerun `{}`",
                upstream.name(),
                self.stage_dir(upstream).display(),
                upstream.name()
            )));
        }
        for (rel, hash) in &manifest.outputs {
            let p = self.path(upstream, rel);
            if !p.exists() {
                return Err(CliError::MissingArtifact {
                    stage: reader.name(),
                    artifact: p,
                    producer: upstream.name(),
                });
            }
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if &sha256_hex(&bytes) != hash {
                return Err(CliError::Stale(format!(
                    "{} changed after `{}` wrote it; rerun `{}`",
                    p.display(),
                    upstream.name(),
                    upstream.name()
                )));
            }
        }
        Ok(manifest)
    }

    /// Whether `stage` already holds valid outputs for this configuration.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.require(stage, stage).is_ok()
    }

    /// Writes the stage manifest last, so an interrupted stage never looks
    /// complete.
    pub fn finish(&self, stage: Stage, outputs: &[&str], started: Instant) -> Result<StageManifest> {
        let mut hashes = BTreeMap::new();
        for rel in outputs {
            let p = self.path(stage, rel);
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            hashes.insert(rel.to_string(), sha256_hex(&bytes));
        }
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            config_hash: self.cfg.stage_hash(stage),
            outputs: hashes,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        };
        let path = self.path(stage, STAGE_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }

    /// Removes a stale manifest before a stage rewrites its outputs.
    pub fn invalidate(&self, stage: Stage) -> Result<()> {
        let path = self.path(stage, STAGE_FILE);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
