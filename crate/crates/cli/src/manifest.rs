use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::CliError;
use mtnet::config::RunConfig;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const DATASET_MANIFEST: &str = "dataset.json";

/// Everything needed to repeat a training or grid-search run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub data_dir: PathBuf,
    /// SHA-256 over the dataset's PNG files, see [`dataset_fingerprint`].
    pub dataset_fingerprint: String,
    pub seed: u64,
    /// Fully resolved configuration, one entry per config key.
    pub config: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    pub started_unix: u64,
    #[serde(default)]
    pub finished_unix: Option<u64>,
}

/// Written next to a generated dataset; contains no timestamps so repeated
/// generation produces identical trees.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub tool: String,
    pub version: String,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn config_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn config_from_map(map: &BTreeMap<String, String>) -> mtnet::Result<RunConfig> {
    let text: String = map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    RunConfig::parse(&text)
}

fn collect_pngs(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_pngs(&path, root, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// Hex SHA-256 over `(relative path, length, bytes)` of every PNG below
/// `root`, in path order.
pub fn dataset_fingerprint(root: &Path) -> Result<String, CliError> {
    let mut files = Vec::new();
    collect_pngs(root, root, &mut files).map_err(|e| CliError::io(root, e))?;
    files.sort();
    let mut hasher = Sha256::new();
    for (rel, path) in files {
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: invalid manifest: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_map_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 2.5e-4;
        cfg.net.base_width = 8;
        assert_eq!(config_from_map(&config_map(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("benign")).unwrap();
        std::fs::write(dir.path().join("benign/a.png"), b"one").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let a = dataset_fingerprint(dir.path()).unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"changed").unwrap();
        assert_eq!(dataset_fingerprint(dir.path()).unwrap(), a);
        std::fs::write(dir.path().join("benign/a.png"), b"two").unwrap();
        assert_ne!(dataset_fingerprint(dir.path()).unwrap(), a);
        assert_eq!(a.len(), 64);
    }
}
