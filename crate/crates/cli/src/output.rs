//! Run directories: atomic file writes, content hashes and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// An output directory plus the provenance lines collected for its manifest.
pub struct RunDir {
    dir: PathBuf,
    command: &'static str,
    info: Vec<(String, String)>,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            info: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records `key=value` as a comment line of the manifest.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.info.push((key.to_string(), value.to_string()));
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        tte_core::data::write_atomic(&self.path(name), contents.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.txt`: provenance as `#` comments, then the effective
    /// configuration, so the manifest itself is a valid config for a rerun.
    pub fn finish(mut self, cfg: &Config) -> Result<()> {
        let mut s = String::from("# tte run manifest\n");
        s.push_str(&format!("# command={}\n# version={VERSION}\n", self.command));
        for (k, v) in &self.info {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&format!("# outputs={}\n", self.files.join(",")));
        s.push_str(&cfg.to_text());
        self.write("manifest.txt", &s)
    }
}
