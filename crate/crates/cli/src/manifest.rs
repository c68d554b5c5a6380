use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::commands::Command;
use crate::error::{CliError, CliResult};
use crate::io::{sha256_file, write_json};

pub const MANIFEST_FORMAT: &str = "mvemu-manifest";

/// Everything needed to regenerate a command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub mc_size: Option<usize>,
    pub command: Command,
    /// Input path -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn hash_all(paths: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// Default manifest location next to the primary artifact.
pub fn default_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn write(path: &Path, m: &RunManifest) -> CliResult<()> {
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::Mismatch("not a run manifest".into()));
    }
    write_json(path, m)
}
