//! Output directories with a manifest of every file written.
//!
//! Hashes follow git's blob scheme over SHA-256: `sha256("blob <len>\0" ‖
//! bytes)`. A set of inputs hashes as a tree: the SHA-256 of its sorted
//! `<hash>  <name>` lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn tree_hash(entries: &[(String, String)]) -> String {
    let mut lines: Vec<String> = entries.iter().map(|(name, h)| format!("{h}  {name}\n")).collect();
    lines.sort();
    hex(&Sha256::digest(lines.concat().as_bytes()))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Inputs of a command, hashed file by file.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    entries: Vec<(String, String)>,
}

impl Inputs {
    pub fn file(&mut self, label: &str, path: &Path) -> CliResult<()> {
        let h = blob_hash(&read(path)?);
        self.entries.push((label.to_string(), h));
        Ok(())
    }

    /// Every regular file directly inside `dir`, labelled `prefix/name`. A
    /// run manifest left there by the command that produced `dir` is skipped.
    pub fn dir(&mut self, prefix: &str, dir: &Path) -> CliResult<()> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST))
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            self.file(&format!("{prefix}/{name}"), &p)?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        tree_hash(&self.entries)
    }
}

/// Writes files under a root and remembers their hashes for the manifest.
///
/// Opening a directory that holds a previous manifest deletes the files it
/// lists, so reruns leave no stale artifacts. A non-empty directory without
/// a manifest is refused.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        if root.exists() {
            let old = root.join(MANIFEST);
            if old.is_file() {
                let text = std::fs::read_to_string(&old).map_err(|e| CliError::io(&old, e))?;
                for rel in text.lines().filter_map(|l| l.strip_prefix("# artifact ")) {
                    if let Some((_, rel)) = rel.split_once("  ") {
                        let _ = std::fs::remove_file(root.join(rel));
                    }
                }
                let _ = std::fs::remove_file(&old);
            } else {
                let mut it = std::fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
                if it.next().is_some() {
                    return Err(CliError::input(format!(
                        "output directory {} is not empty and holds no {MANIFEST}",
                        root.display()
                    )));
                }
            }
        }
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutputDir { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for an artifact that a library call writes itself; call
    /// [`OutputDir::record`] afterwards.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, bytes.as_ref()).map_err(|e| CliError::io(&p, e))?;
        self.files.push((rel.to_string(), blob_hash(bytes.as_ref())));
        Ok(p)
    }

    pub fn record(&mut self, rel: &str) -> CliResult<()> {
        let h = blob_hash(&read(&self.root.join(rel))?);
        self.files.push((rel.to_string(), h));
        Ok(())
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(r, _)| r.as_str())
    }

    /// Writes the manifest: bookkeeping as `#` lines, then the resolved
    /// config, so the file can be fed back as a config.
    pub fn finish(self, command: &str, seed: u64, inputs: &Inputs, config: &str) -> CliResult<PathBuf> {
        let mut m = String::new();
        let _ = writeln!(m, "# colora run manifest");
        let _ = writeln!(m, "# command {command}");
        let _ = writeln!(m, "# seed {seed}");
        let _ = writeln!(m, "# inputs {}", inputs.hash());
        for (name, h) in &inputs.entries {
            let _ = writeln!(m, "# input {h}  {name}");
        }
        for (rel, h) in &self.files {
            let _ = writeln!(m, "# artifact {h}  {rel}");
        }
        m.push_str(config);
        let p = self.root.join(MANIFEST);
        std::fs::write(&p, m).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}
