use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acevc_core::config::RunConfig;
use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const ENV_ROOT: &str = "ACEVC_RUN_DIR";
pub const DEFAULT_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "run.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A run directory being populated by one command.
pub struct RunDir {
    pub path: PathBuf,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl RunDir {
    /// `<root>/<name>`, root taken from the environment when set.
    pub fn create(name: &str, cfg: &RunConfig) -> Result<Self> {
        let root =
            std::env::var_os(ENV_ROOT).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from);
        let path = root.join(name);
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join(CONFIG_FILE), cfg.to_text())?;
        Ok(Self {
            path,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn input(&mut self, label: &str, path: &Path) {
        self.inputs.push((label.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, label: &str, path: &Path) {
        self.outputs.push((label.to_string(), path.to_path_buf()));
    }

    /// Writes `run.txt`; files are hashed now, directories are listed by path.
    pub fn finish(&self, command: &str, seed: u64) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command: {command}");
        let args: Vec<String> = std::env::args().skip(1).collect();
        let _ = writeln!(s, "argv: {}", args.join(" "));
        let _ = writeln!(s, "seed: {seed}");
        let _ = writeln!(
            s,
            "config_sha256: {}",
            sha256_file(&self.file(CONFIG_FILE))?
        );
        for (kind, items) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (label, path) in items {
                if path.is_file() {
                    let _ = writeln!(
                        s,
                        "{kind}.{label}: {} sha256={}",
                        path.display(),
                        sha256_file(path)?
                    );
                } else {
                    let _ = writeln!(s, "{kind}.{label}: {}", path.display());
                }
            }
        }
        std::fs::write(self.file(RECORD_FILE), s)?;
        Ok(())
    }
}
