//! Artifact directory with a content-hashed `MANIFEST.json`.
//!
//! The manifest is rewritten after every file so that an interrupted run leaves
//! an accurate, `complete: false` record of what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::RunError;
use crate::formats::to_json;

pub const MANIFEST_NAME: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// All pipeline stages ran to the end.
    pub complete: bool,
    /// Last stage entered.
    pub stage: String,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    /// Creates (or reuses) `dir`, dropping any manifest left by an earlier run.
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        let io = |source| RunError::Io { path: dir.to_path_buf(), source };
        fs::create_dir_all(dir).map_err(io)?;
        let w = Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                schema_version: crate::config::SCHEMA_VERSION,
                complete: false,
                stage: "setup".into(),
                error: None,
                files: Vec::new(),
            },
        };
        w.flush()?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn stage(&mut self, name: &str) -> Result<(), RunError> {
        self.manifest.stage = name.to_string();
        self.flush()
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| RunError::Io { path, source })?;
        let entry = FileEntry { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        match self.manifest.files.iter_mut().find(|f| f.path == name) {
            Some(f) => *f = entry,
            None => self.manifest.files.push(entry),
        }
        self.flush()
    }

    pub fn fail(&mut self, err: &RunError) -> Result<(), RunError> {
        self.manifest.error = Some(err.to_string());
        self.flush()
    }

    pub fn finish(&mut self) -> Result<(), RunError> {
        self.manifest.complete = true;
        self.manifest.stage = "done".into();
        self.flush()
    }

    fn flush(&self) -> Result<(), RunError> {
        let path = self.dir.join(MANIFEST_NAME);
        fs::write(&path, to_json(&self.manifest)).map_err(|source| RunError::Io { path, source })
    }
}

/// Recomputes every listed hash; returns the paths that are missing or differ.
pub fn verify(dir: &Path) -> Result<Vec<String>, RunError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read(&path).map_err(|source| RunError::Io { path: path.clone(), source })?;
    let m: Manifest =
        serde_json::from_slice(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    Ok(m.files
        .iter()
        .filter(|f| fs::read(dir.join(&f.path)).map(|b| sha256_hex(&b) != f.sha256).unwrap_or(true))
        .map(|f| f.path.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_tracks_files_and_completion() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::create(dir.path()).unwrap();
        w.write("a.txt", b"one").unwrap();
        w.write("a.txt", b"two").unwrap();
        w.write("b.txt", b"three").unwrap();
        assert_eq!(w.manifest().files.len(), 2);
        assert!(!w.manifest().complete);
        assert!(verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("b.txt"), b"tampered").unwrap();
        assert_eq!(verify(dir.path()).unwrap(), vec!["b.txt".to_string()]);
        w.finish().unwrap();
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_NAME)).unwrap()).unwrap();
        assert!(m.complete);
    }
}
