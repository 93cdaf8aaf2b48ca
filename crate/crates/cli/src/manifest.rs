use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    /// Size and digest are omitted for timing logs, which differ between
    /// identical runs, so the manifest itself stays reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, without `--out`.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::data(format!(
                "{}: malformed manifest at line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }
}

/// Output directory that records every artifact written into it. Without a
/// root, writes are skipped and only stdout carries results.
pub struct OutDir {
    root: Option<PathBuf>,
    artifacts: Vec<Artifact>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl OutDir {
    pub fn new(root: Option<&Path>) -> CliResult<Self> {
        if let Some(r) = root {
            std::fs::create_dir_all(r).map_err(|e| CliError::data(format!("{}: {e}", r.display())))?;
        }
        Ok(OutDir {
            root: root.map(Path::to_path_buf),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(name))
    }

    fn record(&mut self, name: &str, bytes: &[u8], deterministic: bool) -> CliResult<()> {
        let Some(path) = self.path(name) else {
            return Ok(());
        };
        std::fs::write(&path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: deterministic.then_some(bytes.len() as u64),
            sha256: deterministic.then(|| hex(&Sha256::digest(bytes))),
            deterministic,
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.record(name, bytes, true)
    }

    pub fn write_timing(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.record(name, bytes, false)
    }

    /// Writes `manifest.json` listing the artifacts in write order.
    pub fn finish(self, command: &str, args: &[String], config: serde_json::Value) -> CliResult<()> {
        let Some(root) = self.root else {
            return Ok(());
        };
        let manifest = Manifest {
            tool: "occ".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: args.to_vec(),
            config,
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = root.join(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// `args` without any `--out DIR` / `--out=DIR`.
pub fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_out_removes_both_spellings() {
        let args: Vec<String> = ["eval-occ", "--out", "d", "--grid", "g", "--out=x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(strip_out(&args), vec!["eval-occ", "--grid", "g"]);
    }
}
