//! Run manifests written next to every command output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::write_text;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The full argument vector, so the run can be replayed verbatim.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input path -> hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn hash_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<BTreeMap<String, String>> {
        paths
            .into_iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    }

    pub fn write(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = manifest_path(primary_output);
        let mut body = serde_json::to_string_pretty(self).expect("manifests serialize");
        body.push('\n');
        write_text(&path, &body)?;
        Ok(path)
    }
}
