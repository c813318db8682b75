use std::path::Path;
use std::time::SystemTime;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("configuration serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, args: &[String], config: &T, seed: Option<u64>, started: SystemTime) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: config_hash(config),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: timestamp(started),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(mut self, path: &Path, outputs: Vec<String>) -> anyhow::Result<()> {
        self.finished = timestamp(SystemTime::now());
        self.outputs = outputs;
        std::fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}
