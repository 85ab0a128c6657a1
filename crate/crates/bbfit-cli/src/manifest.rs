//! Every run writes a manifest next to its outputs: the effective
//! configuration, its hash, crate versions and the seeds used. No
//! timestamps, so identical runs leave identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    versions: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    config: serde_json::Value,
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &impl Serialize,
    seeds: &[(&str, u64)],
) -> Result<(), CliError> {
    let config = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    let manifest = Manifest {
        command: command.to_string(),
        config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        versions: BTreeMap::from([
            ("bbfit".to_string(), bbfit::VERSION.to_string()),
            ("bbfit-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]),
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        config,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
