//! `manifest.json` kept in every artifact directory. One entry per stage that
//! wrote into the directory; no timestamps, so reruns compare byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the directory) to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let m: Self = serde_json::from_slice(&fs::read(&p)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(CliError::Runtime(format!(
                "{}: schema version {} (expected {SCHEMA_VERSION})",
                p.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Insert or replace `stage` and rewrite the file.
    pub fn record(dir: &Path, stage: &str, rec: StageRecord) -> Result<(), CliError> {
        let mut m = Self::read(dir)?;
        m.stages.insert(stage.to_string(), rec);
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_config<C: Serialize>(config: &C) -> Result<(String, serde_json::Value), CliError> {
    let value = serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?;
    // serde_json maps are sorted, so this text is canonical
    let text = serde_json::to_string(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((sha256_hex(text.as_bytes()), value))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Files under `dir`, relative and sorted, skipping the manifest itself.
pub fn tree_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hash of every file under `dir` (names and contents).
pub fn hash_tree(dir: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for rel in tree_files(dir)? {
        let key = rel_key(&rel);
        h.update(key.as_bytes());
        h.update([0]);
        h.update(hash_file(&dir.join(&rel))?.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hashes for the named files of `dir`.
pub fn hash_outputs(dir: &Path, files: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    files
        .iter()
        .map(|f| Ok((f.to_string(), hash_file(&dir.join(f))?)))
        .collect()
}

/// Hashes for every file under `dir`.
pub fn hash_all_outputs(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    tree_files(dir)?
        .into_iter()
        .map(|rel| Ok((rel_key(&rel), hash_file(&dir.join(&rel))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest_and_tree_hash_ignores_manifest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let d = tempfile::tempdir().unwrap();
        fs::create_dir_all(d.path().join("a")).unwrap();
        fs::write(d.path().join("a/x.txt"), "1").unwrap();
        fs::write(d.path().join("y.txt"), "2").unwrap();
        let h0 = hash_tree(d.path()).unwrap();
        Manifest::record(
            d.path(),
            "s",
            StageRecord {
                seed: 1,
                config_sha256: String::new(),
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: hash_all_outputs(d.path()).unwrap(),
            },
        )
        .unwrap();
        assert_eq!(hash_tree(d.path()).unwrap(), h0);
        let m = Manifest::read(d.path()).unwrap();
        assert_eq!(m.stages["s"].outputs.keys().collect::<Vec<_>>(), ["a/x.txt", "y.txt"]);
        fs::write(d.path().join("y.txt"), "3").unwrap();
        assert_ne!(hash_tree(d.path()).unwrap(), h0);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = hash_config(&serde_json::json!({"b": 1, "a": [1.5, 2]})).unwrap();
        let b = hash_config(&serde_json::json!({"a": [1.5, 2], "b": 1})).unwrap();
        assert_eq!(a, b);
    }
}
