//! Writing results and the run record.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hydrokam_core::io::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::Manifest;
use crate::run::{Check, Outputs};
use crate::svg;

pub const RECORD_FILE: &str = "run_record.json";
pub const SIDECAR_FILE: &str = "results.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub value: f64,
    pub relation: String,
    pub threshold: f64,
    pub passed: bool,
}

impl From<&Check> for CheckEntry {
    fn from(c: &Check) -> Self {
        Self {
            name: c.name.clone(),
            value: c.value,
            relation: c.relation.into(),
            threshold: c.threshold,
            passed: c.passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub kind: String,
    pub tool_version: String,
    /// SHA-256 of the manifest file bytes.
    pub manifest_sha256: String,
    /// Git blob hash (SHA-256 flavour) of the validated manifest with defaults filled.
    pub input_hash: String,
    pub wall_time_secs: f64,
    pub files: Vec<FileEntry>,
    pub checks: Vec<CheckEntry>,
    pub passed: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `sha256("blob {len}\0" || bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn put(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<FileEntry>) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    files.push(FileEntry {
        path: name.into(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    });
    Ok(())
}

/// Writes tables, sidecar, plots and the run record into `dir`.
pub fn emit(
    manifest: &Manifest,
    manifest_bytes: &[u8],
    outputs: &Outputs,
    wall_time_secs: f64,
    dir: &Path,
) -> Result<(PathBuf, RunRecord)> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut files = Vec::new();
    for (name, table) in &outputs.tables {
        put(dir, name, table.to_csv().as_bytes(), &mut files)?;
    }
    if manifest.emit.json {
        let text = serde_json::to_string_pretty(&outputs.sidecar)? + "\n";
        put(dir, SIDECAR_FILE, text.as_bytes(), &mut files)?;
    }
    if manifest.emit.svg {
        for (name, plot) in &outputs.plots {
            put(dir, name, svg::render(plot).as_bytes(), &mut files)?;
        }
    }
    let canonical = serde_json::to_vec(manifest)?;
    let checks: Vec<CheckEntry> = outputs.checks.iter().map(CheckEntry::from).collect();
    let record = RunRecord {
        name: manifest.name.clone(),
        kind: manifest.kind.as_str().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        manifest_sha256: sha256_hex(manifest_bytes),
        input_hash: blob_hash(&canonical),
        wall_time_secs,
        files,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    let path = dir.join(RECORD_FILE);
    write_atomic(&path, (serde_json::to_string_pretty(&record)? + "\n").as_bytes())?;
    Ok((path, record))
}

/// Problems found when re-hashing the files listed in a record.
pub fn verify(record: &RunRecord, dir: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    for f in &record.files {
        match std::fs::read(dir.join(&f.path)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            Ok(_) => problems.push(format!("{}: content hash mismatch", f.path)),
            Err(e) => problems.push(format!("{}: {e}", f.path)),
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_object_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
