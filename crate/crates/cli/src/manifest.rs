use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Record of one command invocation.
///
/// `config_hash` covers the command, every option except the output
/// location, and the input file contents, so two runs with the same hash
/// see the same problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub inputs: Vec<FileDigest>,
    pub config: Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub workers: usize,
    pub timings_ms: BTreeMap<String, f64>,
    pub outputs: Vec<FileDigest>,
    pub exit_code: i32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn config_hash(command: &str, config: &Value, inputs: &[FileDigest]) -> String {
    let digests: Vec<&str> = inputs.iter().map(|d| d.sha256.as_str()).collect();
    // serde_json maps are sorted, so this serialization is canonical.
    let canonical = json!({ "command": command, "config": config, "inputs": digests });
    sha256_hex(canonical.to_string().as_bytes())
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let value = crate::io::read_json(path)?;
        serde_json::from_value(value).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let value = serde_json::to_value(self).map_err(|e| CliError::parse(e.to_string()))?;
        crate::io::write_json(path, &value)
    }
}
