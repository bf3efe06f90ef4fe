//! Output files and the run manifest.
//!
//! Files are written only after a subcommand has finished computing, so a
//! failed run leaves nothing behind. `manifest.toml` records the config hash,
//! seed and a hash per output file; wall-clock times live in
//! `manifest.meta.toml` so every other file is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::commands::RunOutput;
use crate::config::{sha256_hex, ExperimentConfig, SCHEMA_VERSION};
use crate::CliError;

pub const MANIFEST: &str = "manifest.toml";
pub const METADATA: &str = "manifest.meta.toml";
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    schema_version: u32,
    seed: u64,
    config_sha256: String,
    violations: usize,
    files: BTreeMap<&'a str, String>,
}

#[derive(Serialize)]
struct Metadata {
    written_unix_s: u64,
    crate_version: &'static str,
}

pub fn manifest_text(command: &str, cfg: &ExperimentConfig, out: &RunOutput) -> String {
    let mut files: BTreeMap<&str, String> = out
        .files
        .iter()
        .map(|(name, bytes)| (name.as_str(), sha256_hex(bytes)))
        .collect();
    files.insert(EFFECTIVE_CONFIG, sha256_hex(cfg.canonical().as_bytes()));
    toml::to_string(&Manifest {
        command,
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        config_sha256: cfg.sha256(),
        violations: out.violations,
        files,
    })
    .expect("manifest serialises")
}

pub fn write_outputs(command: &str, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), CliError> {
    let dir = &cfg.output_dir;
    let io = |e: std::io::Error| CliError::Internal(format!("writing {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    for (name, bytes) in &out.files {
        fs::write(dir.join(name), bytes).map_err(io)?;
    }
    fs::write(dir.join(EFFECTIVE_CONFIG), cfg.canonical()).map_err(io)?;
    fs::write(dir.join(MANIFEST), manifest_text(command, cfg, out)).map_err(io)?;
    let meta = Metadata {
        written_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(dir.join(METADATA), toml::to_string(&meta).expect("metadata serialises")).map_err(io)?;
    Ok(())
}
