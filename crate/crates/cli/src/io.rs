//! Output plumbing: atomic writes and the per-run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use noveltykit::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parent_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_of(path);
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Fills a fresh directory through `fill`, then swaps it in for `path`.
pub fn write_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = parent_of(path);
    fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new()
        .prefix(".staging")
        .tempdir_in(parent)?;
    fill(staging.path())?;
    let staged = staging.keep();
    if path.exists() {
        let old = tempfile::Builder::new()
            .prefix(".replaced")
            .tempdir_in(parent)?
            .keep();
        fs::rename(path, old.join("dir"))?;
        fs::rename(&staged, path)?;
        fs::remove_dir_all(old)?;
    } else {
        fs::rename(&staged, path)?;
    }
    Ok(())
}

/// Rejects runs whose outputs would overwrite one of their inputs.
pub fn check_disjoint(inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let canon = |p: &Path| -> Option<PathBuf> {
        let dir = fs::canonicalize(parent_of(p)).ok()?;
        Some(dir.join(p.file_name()?))
    };
    for o in outputs {
        let Some(co) = canon(o) else { continue };
        for i in inputs {
            if canon(i).is_some_and(|ci| ci == co || ci.starts_with(&co)) {
                return Err(Error::Config(format!(
                    "output {} would overwrite input {}",
                    o.display(),
                    i.display()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn hash_entries(paths: &[PathBuf]) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            out.extend(hash_entries(&files)?);
        } else {
            out.push(FileEntry {
                path: p.display().to_string(),
                sha256: sha256_hex(&fs::read(p)?),
            });
        }
    }
    Ok(out)
}

/// Tracks what a command read and wrote so a manifest can be emitted next
/// to its primary output.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    command: &'a str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, command: &'a str) -> Self {
        Self {
            cfg,
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input<'p>(&mut self, path: &'p Path) -> &'p Path {
        self.inputs.push(path.to_path_buf());
        path
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_dir(&mut self, path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        write_dir_atomic(path, fill)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes `<primary output>.manifest.json`.
    pub fn finish(self) -> Result<()> {
        let Some(primary) = self.outputs.first() else {
            return Ok(());
        };
        let config_bytes = serde_json::to_vec(self.cfg)?;
        let manifest = Manifest {
            tool: "noveltykit",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.cfg.seed,
            config_sha256: sha256_hex(&config_bytes),
            config: self.cfg,
            inputs: hash_entries(&self.inputs)?,
            outputs: hash_entries(&self.outputs)?,
        };
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        write_atomic(
            &primary.with_file_name(name),
            &noveltykit::dataio::to_json_bytes(&manifest)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 1);
    }

    #[test]
    fn dir_swap_replaces_old_tree() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model");
        write_dir_atomic(&p, |d| Ok(fs::write(d.join("x"), "1")?)).unwrap();
        write_dir_atomic(&p, |d| Ok(fs::write(d.join("y"), "2")?)).unwrap();
        assert!(!p.join("x").exists());
        assert_eq!(fs::read_to_string(p.join("y")).unwrap(), "2");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn output_over_input_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.csv");
        fs::write(&p, "x").unwrap();
        assert!(check_disjoint(std::slice::from_ref(&p), std::slice::from_ref(&p)).is_err());
        assert!(check_disjoint(std::slice::from_ref(&p), &[dir.path().join("out.csv")]).is_ok());
    }
}
