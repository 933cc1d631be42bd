//! Run manifests: every subcommand serializes its configuration, input
//! hashes, and output names next to its outputs, so any run can be verified
//! and replayed. Two runs with equal manifests produce byte-identical
//! outputs.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Flag name to value, sorted; excludes `--out` and `--threads`
    /// (execution details that do not affect output bytes).
    pub flags: BTreeMap<String, String>,
    /// Content hashes of all input files, sorted by path.
    pub inputs: Vec<InputRecord>,
    /// Output file names relative to the output directory, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: BTreeMap<String, String>) -> Self {
        Self {
            tool: "penmark".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            flags,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn finish(&mut self, out_dir: &Path, mut outputs: Vec<String>) -> CliResult<()> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.sort();
        self.outputs = outputs;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(out_dir.join(MANIFEST_NAME), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Input(format!("{}: not a valid manifest: {e}", path.display())))
    }

    /// Checks that every recorded input still has the recorded content.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for rec in &self.inputs {
            let bytes = std::fs::read(&rec.path)
                .map_err(|e| CliError::Input(format!("{}: {e}", rec.path)))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(CliError::Input(format!(
                    "{}: content changed since the manifest was written",
                    rec.path
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the argument vector this manifest describes, pointing the
    /// output at `out_dir`.
    pub fn to_argv(&self, out_dir: &Path) -> Vec<String> {
        let mut argv = vec![self.subcommand.clone()];
        for (key, value) in &self.flags {
            if value == "true" {
                argv.push(format!("--{key}"));
            } else {
                argv.push(format!("--{key}"));
                argv.push(value.clone());
            }
        }
        argv.push("--out".to_string());
        argv.push(out_dir.display().to_string());
        argv
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn ensure_out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))
}
