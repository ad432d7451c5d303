//! Run manifests: what produced an output directory, and from which inputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub args: Vec<String>,
    /// The effective configuration after defaults and flag overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over the contents of every input file.
    pub inputs_sha256: String,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Each command writes `manifest.<command>.json` into its output directory.
pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("manifest.{command}.json"))
}

fn skipped(name: &str) -> bool {
    // Manifests carry timestamps, and dot files are in-flight temporaries.
    name.starts_with('.') || (name.starts_with("manifest.") && name.ends_with(".json"))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if skipped(&name) {
            continue;
        }
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push((rel.to_string_lossy().replace('\\', "/"), path));
        }
    }
    Ok(())
}

/// Hash of the inputs in the order given; directories are walked in path order.
pub fn hash_inputs(inputs: &[&Path]) -> io::Result<String> {
    let mut h = Sha256::new();
    for input in inputs {
        let mut files = Vec::new();
        if input.is_dir() {
            collect_files(input, input, &mut files)?;
            files.sort();
        } else {
            files.push((String::new(), input.to_path_buf()));
        }
        h.update(b"input\0");
        for (rel, path) in files {
            let bytes = fs::read(&path)?;
            h.update(rel.as_bytes());
            h.update([0u8]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
