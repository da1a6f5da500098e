use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

pub const TOOL: &str = "accent-forge";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub unix_time: u64,
    pub outputs: Vec<PathBuf>,
}

impl Provenance {
    pub fn new(command: &str, args: Vec<String>, config_hash: String, seed: u64, deterministic: bool) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            args,
            config_hash,
            seed,
            deterministic,
            unix_time: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }

    /// `provenance.json` for directory outputs, `<file>.provenance.json`
    /// beside file outputs.
    pub fn write_beside(&self, output: &Path) -> Result<(), CliError> {
        let path = if output.is_dir() {
            output.join("provenance.json")
        } else {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push(".provenance.json");
            output.with_file_name(name)
        };
        let body = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&path, body).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
    }
}
