//! `manifest.json`: every file a command wrote, with its SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    /// Effective settings after flags and config-file overrides.
    pub settings: serde_json::Value,
    pub files: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl Manifest {
    /// Hashes everything under `out` (except an existing manifest) in path order.
    pub fn collect(out: &Path, command: &str, args: Vec<String>, settings: serde_json::Value) -> Result<Self> {
        let mut paths = Vec::new();
        walk(out, &mut paths)?;
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let rel = p.strip_prefix(out).expect("walked from out");
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.push(FileEntry { path: rel, bytes, sha256: sha256_file(&p)? });
        }
        Ok(Manifest { command: command.to_string(), version: env!("CARGO_PKG_VERSION").to_string(), args, settings, files })
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_nested_files_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.txt"), b"abc").unwrap();
        std::fs::write(dir.path().join("b.txt"), b"").unwrap();
        let m = Manifest::collect(dir.path(), "t", vec![], serde_json::Value::Null).unwrap();
        m.write(dir.path()).unwrap();
        let again = Manifest::collect(dir.path(), "t", vec![], serde_json::Value::Null).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a/x.txt", "b.txt"]);
        assert_eq!(m.files[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
