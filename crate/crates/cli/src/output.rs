//! Deterministic artifact writing: CSV files with round-trip-exact floats
//! and an atomically written run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::CliError;

/// 17 significant digits in scientific notation: parses back to the same f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV field: formatted float, plain integer, literal, or empty.
pub enum Field {
    F(f64),
    OptF(Option<f64>),
    I(usize),
    S(String),
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::F(v)
    }
}

impl From<Option<f64>> for Field {
    fn from(v: Option<f64>) -> Self {
        Field::OptF(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::I(v)
    }
}

impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::S(v.to_string())
    }
}

pub struct CsvWriter {
    writer: BufWriter<File>,
    path: PathBuf,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", path.display())))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{}", header.join(","))
            .map_err(|e| CliError::config(format!("write {}: {e}", path.display())))?;
        Ok(CsvWriter {
            writer,
            path: path.to_path_buf(),
            columns: header.len(),
        })
    }

    pub fn row(&mut self, fields: &[Field]) -> Result<(), CliError> {
        assert_eq!(fields.len(), self.columns, "column count mismatch");
        let mut line = String::new();
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match f {
                Field::F(v) => line.push_str(&fmt_f64(*v)),
                Field::OptF(Some(v)) => line.push_str(&fmt_f64(*v)),
                Field::OptF(None) => {}
                Field::I(v) => line.push_str(&v.to_string()),
                Field::S(s) => line.push_str(s),
            }
        }
        writeln!(self.writer, "{line}")
            .map_err(|e| CliError::config(format!("write {}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer
            .flush()
            .map_err(|e| CliError::config(format!("flush {}: {e}", self.path.display())))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceInfo {
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

/// Run manifest: resolved config, artifact list, wall clock, divergence
/// outcome, and tool version. Written atomically (temp file + rename) as the
/// final act of a run, so its presence certifies completion.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub config: Config,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub divergence: DivergenceInfo,
}

impl RunManifest {
    pub fn new(config: Config, artifacts: Vec<String>, wall_clock_seconds: f64) -> Self {
        RunManifest {
            schema: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            artifacts,
            wall_clock_seconds,
            divergence: DivergenceInfo {
                diverged: false,
                step: None,
            },
        }
    }

    pub fn with_divergence(mut self, step: Option<usize>) -> Self {
        self.divergence = DivergenceInfo {
            diverged: step.is_some(),
            step,
        };
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let target = out_dir.join("manifest.json");
        let tmp = out_dir.join(".manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("manifest serialization: {e}")))?;
        std::fs::write(&tmp, text)
            .map_err(|e| CliError::config(format!("write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &target)
            .map_err(|e| CliError::config(format!("rename to {}: {e}", target.display())))?;
        Ok(())
    }
}

/// Creates the output directory (and parents) if needed.
pub fn ensure_out_dir(config: &Config) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&config.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}
