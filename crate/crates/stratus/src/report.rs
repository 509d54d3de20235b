//! Self-describing JSON reports: every pipeline emits one document that
//! embeds the tool version and a hash of the configuration that produced
//! it, so results can be traced back to their inputs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One pipeline report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Tool name.
    pub tool: String,
    /// Tool version (crate version).
    pub version: String,
    /// Subcommand that produced the report.
    pub command: String,
    /// SHA-256 of the canonical configuration used.
    pub config_sha256: String,
    /// Base seed of every randomized stage, when one applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Command-specific results.
    pub results: Value,
}

impl Report {
    pub fn new(command: &str, config_bytes: &[u8], seed: Option<u64>, results: Value) -> Self {
        Report {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(config_bytes),
            seed,
            results,
        }
    }

    /// Pretty JSON text of the report (newline-terminated).
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("report serialization: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// Write the report to a file.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
