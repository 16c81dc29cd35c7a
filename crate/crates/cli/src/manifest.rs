//! Run manifests: which command produced an artifact, from which inputs, with which settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input path as given on the command line -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest's directory) -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest describing a single-file artifact sits next to it.
pub fn file_manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Hash that identifies an input: the file itself, or a directory's run manifest.
pub fn input_hash(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let m = path.join(DIR_MANIFEST);
        if m.exists() {
            return sha256_file(&m);
        }
        return sha256_file(&path.join("manifest.json"));
    }
    sha256_file(path)
}

fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: malformed run manifest: {e}", path.display())))
}

/// Checks an input artifact against the hashes its run manifest recorded, if it has one.
pub fn verify_input(path: &Path) -> Result<(), CliError> {
    let (manifest_path, base) = if path.is_dir() {
        (path.join(DIR_MANIFEST), path.to_path_buf())
    } else {
        (file_manifest_path(path), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !manifest_path.exists() {
        return Ok(());
    }
    let manifest = read_manifest(&manifest_path)?;
    let files: Vec<(&String, &String)> = if path.is_dir() {
        manifest.outputs.iter().collect()
    } else {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.outputs.iter().filter(|(k, _)| **k == name).collect()
    };
    for (name, expected) in files {
        let actual = sha256_file(&base.join(name))?;
        if &actual != expected {
            return Err(CliError::Input(format!(
                "{}: hash {actual} does not match {expected} recorded in {}",
                base.join(name).display(),
                manifest_path.display()
            )));
        }
    }
    Ok(())
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                config,
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix: now_unix(),
                finished_unix: 0,
            },
        }
    }

    pub fn set_config(&mut self, config: Value) {
        self.manifest.config = config;
    }

    /// Verifies an input against its own manifest and records its hash.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        verify_input(path)?;
        self.manifest.inputs.insert(path.display().to_string(), input_hash(path)?);
        Ok(())
    }

    /// Writes the manifest for one output file next to it.
    pub fn finish_file(mut self, artifact: &Path) -> Result<RunManifest, CliError> {
        let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.manifest.outputs.insert(name, sha256_file(artifact)?);
        self.write(&file_manifest_path(artifact))
    }

    /// Writes `run_manifest.json` into `dir`, hashing every listed file in it.
    pub fn finish_dir(mut self, dir: &Path, files: &[String]) -> Result<RunManifest, CliError> {
        for f in files {
            self.manifest.outputs.insert(f.clone(), sha256_file(&dir.join(f))?);
        }
        self.write(&dir.join(DIR_MANIFEST))
    }

    fn write(mut self, path: &Path) -> Result<RunManifest, CliError> {
        self.manifest.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(self.manifest)
    }
}
