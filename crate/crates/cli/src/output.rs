use std::path::{Path, PathBuf};

use mshvit_core::config::RunConfig;
use mshvit_core::train::write_atomic;
use mshvit_core::CoreError;
use serde::Serialize;

use crate::config::config_hash;
use crate::CliError;

pub const RUN_MANIFEST_PREFIX: &str = "run_";

/// Output directory guard: refuses existing targets unless overwriting, and
/// collects every artifact for the run manifest.
pub struct Outputs {
    pub dir: PathBuf,
    overwrite: bool,
    artifacts: Vec<PathBuf>,
    command: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    /// Paths relative to the output directory, sorted.
    artifacts: Vec<String>,
    config: &'a RunConfig,
}

impl Outputs {
    pub fn new(dir: Option<&Path>, overwrite: bool, command: &'static str) -> Result<Self, CliError> {
        let dir = dir
            .ok_or_else(|| CliError::Usage(format!("{command} requires --out <DIR>")))?
            .to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::Io { path: dir.clone(), source: e })?;
        let out = Self {
            dir,
            overwrite,
            artifacts: Vec::new(),
            command,
        };
        out.check(&out.manifest_path())?;
        Ok(out)
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join(format!("{RUN_MANIFEST_PREFIX}{}.json", self.command))
    }

    pub fn check(&self, path: &Path) -> Result<(), CliError> {
        if !self.overwrite && path.exists() {
            return Err(CoreError::Exists(path.to_path_buf()).into());
        }
        Ok(())
    }

    /// Path for a new artifact named `name` in the output directory.
    pub fn claim(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(name);
        self.check(&p)?;
        Ok(p)
    }

    pub fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.claim(name)?;
        write_atomic(&p, bytes)?;
        self.record(p.clone());
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CoreError::Format(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(mut self, cfg: &RunConfig) -> Result<(), CliError> {
        let mut rel: Vec<String> = self
            .artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        rel.sort();
        let manifest = RunManifest {
            command: self.command,
            config_sha256: config_hash(cfg),
            seed: cfg.seed,
            artifacts: rel,
            config: cfg,
        };
        let path = self.manifest_path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        self.write_json(&name, &manifest)?;
        Ok(())
    }
}
