//! Deterministic CSV and JSON artifact writers.
//!
//! Floats print with Rust's shortest-round-trip formatting and all rows are
//! emitted in a fixed order, so identical runs produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write a CSV file with a fixed header and row-major content.
    pub fn write_csv(&self, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<PathBuf> {
        let path = self.join(name);
        let mut out = String::new();
        out.push_str(header);
        out.push('\n');
        for row in rows {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.join(name);
        let mut text = serde_json::to_string_pretty(value).context("serializing report")?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Echo the resolved configuration for provenance.
    pub fn write_config_echo<T: Serialize>(&self, config: &T) -> Result<PathBuf> {
        self.write_json("config_echo.json", config)
    }

    pub fn log_line(&self, line: &str) -> Result<()> {
        let path = self.join("run.log");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Shortest-round-trip float formatting; integers keep a trailing `.0` so
/// every cell parses back as a float.
pub fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 && v.is_finite() {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
