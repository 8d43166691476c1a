use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    /// Checkpoints or grids the command read, with their digests.
    pub inputs: Vec<FileEntry>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_entry(path: &Path, shown_as: PathBuf) -> anyhow::Result<FileEntry> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileEntry {
        path: shown_as,
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn walk(root: &Path, dir: &Path, skip: &Path, out: &mut Vec<FileEntry>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, skip, out)?;
        } else if path != skip {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
            out.push(file_entry(&path, rel)?);
        }
    }
    Ok(())
}

impl RunManifest {
    /// Inventories every file under `out_dir` (other manifests included) and
    /// writes `<command>.manifest.json` there.
    pub fn write(
        command: &str,
        config_hash: String,
        inputs: Vec<FileEntry>,
        started_unix_s: u64,
        out_dir: &Path,
    ) -> anyhow::Result<PathBuf> {
        let target = out_dir.join(format!("{command}.manifest.json"));
        let mut files = Vec::new();
        walk(out_dir, out_dir, &target, &mut files)?;
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            inputs,
            started_unix_s,
            finished_unix_s: unix_now(),
            files,
        };
        std::fs::write(&target, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", target.display()))?;
        Ok(target)
    }
}
