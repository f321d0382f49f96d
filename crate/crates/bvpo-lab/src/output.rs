//! Deterministic artifact writers.
//!
//! CSV files open with a `#` comment carrying the config hash and tool
//! version, then a header row; floats are printed with 17 significant digits
//! and no locale formatting. JSON artifacts carry the same two fields
//! inline. Nothing written here depends on time or environment, so re-runs
//! are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// 17 significant digits, scientific notation.
pub fn fmt_f64(value: f64) -> String {
    if value.is_nan() {
        "nan".into()
    } else if value.is_infinite() {
        if value > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{value:.16e}")
    }
}

pub struct CsvWriter {
    buffer: String,
    path: PathBuf,
}

impl CsvWriter {
    pub fn new(dir: &Path, name: &str, config_hash: &str, header: &str) -> Self {
        let mut buffer = String::new();
        let _ = writeln!(
            buffer,
            "# config_hash={config_hash} tool_version={TOOL_VERSION}"
        );
        let _ = writeln!(buffer, "{header}");
        CsvWriter {
            buffer,
            path: dir.join(name),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buffer, "{}", fields.join(","));
    }

    pub fn finish(self) -> Result<()> {
        fs::write(&self.path, self.buffer)?;
        Ok(())
    }
}

/// Serialize a JSON artifact (pretty, trailing newline).
pub fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::error::CliError::config(format!("serialize {name}: {e}")))?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// Write raw text prefixed with the hash/version comment line.
pub fn write_commented(dir: &Path, name: &str, config_hash: &str, body: &str) -> Result<()> {
    let mut text = format!("# config_hash={config_hash} tool_version={TOOL_VERSION}\n");
    text.push_str(body);
    fs::write(dir.join(name), text)?;
    Ok(())
}
