//! Output files of one run and their manifest.
//!
//! Every CSV starts with `# config_sha256=<hash>` followed by a header row.
//! Floats are written in Rust's shortest round-trip form, so identical
//! results give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use homlab_core::pde::dump::save_field;
use homlab_core::pde::GridField;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::CliError;
use crate::plot::{svg_loglog, Series};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: &'static str,
    pub config_sha256: String,
    pub homlab_version: &'static str,
    pub files: Vec<ManifestEntry>,
}

pub struct Artifacts {
    dir: PathBuf,
    config_hash: String,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path, config_hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash,
            files: Vec::new(),
        })
    }

    fn register(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut text = format!("# config_sha256={}\n{}\n", self.config_hash, header.join(","));
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(self.register(name), text)?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        fs::write(self.register(name), text)?;
        Ok(())
    }

    /// Two-column whitespace-separated file for plotting tools.
    pub fn dat(&mut self, name: &str, columns: (&str, &str), points: &[(f64, f64)]) -> Result<(), CliError> {
        let mut text = format!("# config_sha256={}\n# {} {}\n", self.config_hash, columns.0, columns.1);
        for (x, y) in points {
            text.push_str(&format!("{x} {y}\n"));
        }
        fs::write(self.register(name), text)?;
        Ok(())
    }

    pub fn svg(&mut self, name: &str, title: &str, labels: (&str, &str), series: &[Series]) -> Result<(), CliError> {
        fs::write(self.register(name), svg_loglog(title, labels, series))?;
        Ok(())
    }

    pub fn field(&mut self, name: &str, field: &GridField) -> Result<(), CliError> {
        let path = self.register(name);
        save_field(&path, field)?;
        Ok(())
    }

    /// Hashes every written file and writes `manifest.json`.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
        self.json("config.json", cfg)?;
        self.files.sort();
        self.files.dedup();
        let mut files = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let bytes = fs::read(self.dir.join(name))?;
            files.push(ManifestEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            schema_version: cfg.schema_version,
            command: cfg.command.name(),
            config_sha256: self.config_hash.clone(),
            homlab_version: env!("CARGO_PKG_VERSION"),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

/// Formats a row of floats.
pub fn row(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}
