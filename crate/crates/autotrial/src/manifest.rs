//! Run manifests: enough to re-run a command and to verify its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::formats::{write_bytes, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    /// Command-specific arguments that are not config keys.
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Files under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            out.extend(files_under(&e)?);
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(out)
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in paths {
        for f in files_under(p)? {
            out.push(FileDigest { path: f.display().to_string(), sha256: sha256_file(&f)? });
        }
    }
    Ok(out)
}

/// Writes `config.toml` and `manifest.json` into `out`, digesting every
/// other file there.
pub fn write_manifest(
    out: &Path,
    command: &str,
    args: Vec<String>,
    cfg: &RunConfig,
    inputs: &[PathBuf],
) -> Result<Manifest> {
    write_bytes(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut outputs = Vec::new();
    for f in files_under(out)? {
        let rel = f.strip_prefix(out).unwrap_or(&f);
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        outputs.push(FileDigest { path, sha256: sha256_file(&f)? });
    }
    let m = Manifest {
        command: command.into(),
        args,
        version: VERSION.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: digest_inputs(inputs)?,
        outputs,
    };
    write_json(&out.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

/// Recomputes output digests; returns the paths that no longer match.
pub fn verify(out: &Path) -> Result<Vec<String>> {
    let m: Manifest = crate::formats::read_json(&out.join(MANIFEST_FILE))?;
    let mut bad = Vec::new();
    for d in &m.outputs {
        let p = out.join(&d.path);
        if !p.is_file() || sha256_file(&p)? != d.sha256 {
            bad.push(d.path.clone());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_outputs_and_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        write_bytes(&dir.path().join("a/b.txt"), b"x").unwrap();
        let m = write_manifest(dir.path(), "synth", vec![], &RunConfig::default(), &[]).unwrap();
        let paths: Vec<&str> = m.outputs.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, ["a/b.txt", "config.toml"]);
        assert!(verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a/b.txt"), b"y").unwrap();
        assert_eq!(verify(dir.path()).unwrap(), ["a/b.txt"]);
    }
}
