//! Workdir plumbing: provenance sidecars and actionable missing-artifact
//! errors. Artifacts themselves stay byte-deterministic for a fixed config
//! and seed; anything time-dependent lives in the `.meta.json` sidecar.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Provenance record written next to every artifact.
#[derive(Debug, Serialize)]
pub struct ArtifactMeta<'a> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub created_unix: u64,
    #[serde(flatten)]
    pub extra: BTreeMap<&'a str, Value>,
}

/// `metrics.json` gets a `metrics.json.meta.json` sidecar; the full file
/// name is kept so siblings with different extensions never collide.
pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(
    artifact: &Path,
    command: &str,
    config_hash: &str,
    seed: u64,
    extra: BTreeMap<&str, Value>,
) -> Result<(), CliError> {
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = ArtifactMeta { command, config_hash, seed, created_unix, extra };
    let file = File::create(meta_path(artifact))
        .map_err(|e| CliError::Data(format!("cannot write sidecar for {}: {e}", artifact.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta)
        .map_err(|e| CliError::Data(format!("cannot encode sidecar: {e}")))?;
    Ok(())
}

/// Open an upstream artifact, or explain which command produces it.
pub fn require(path: &Path, producer: &str) -> Result<BufReader<File>, CliError> {
    match File::open(path) {
        Ok(file) => Ok(BufReader::new(file)),
        Err(_) => Err(CliError::Data(format!(
            "missing {}; run `cycledst {producer}` first",
            path.display()
        ))),
    }
}

/// Create an artifact file inside the workdir, creating the workdir too.
pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    let file = File::create(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}
