//! Experiment reports and deterministic CSV emission.
//!
//! All files are written with LF terminators and Rust's shortest-round-trip
//! float formatting, so identical runs produce byte-identical outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite metric {name} = {value} in experiment {experiment}")]
    NonFiniteMetric {
        experiment: String,
        name: String,
        value: f64,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a CSV with a header row; every row must match the header width.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), ReportError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "{}", header.join(",")).map_err(|e| io_err(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(writer, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

pub fn fmt_f64(value: f64) -> String {
    format!("{value}")
}

/// Name, config echo, scalar metric rows, and the files an experiment wrote.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub config_echo: String,
    summary: Vec<(String, f64)>,
    files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, config_echo: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            config_echo: config_echo.into(),
            summary: Vec::new(),
            files: Vec::new(),
        }
    }

    /// Record a scalar metric; non-finite values are contract violations.
    pub fn push_metric(&mut self, name: impl Into<String>, value: f64) -> Result<(), ReportError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(ReportError::NonFiniteMetric {
                experiment: self.name.clone(),
                name,
                value,
            });
        }
        self.summary.push((name, value));
        Ok(())
    }

    pub fn push_file(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn metrics(&self) -> &[(String, f64)] {
        &self.summary
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Write `metric,value` rows. The config echo goes to a sidecar file so
    /// the summary stays method-agnostic and diffable across runs.
    pub fn write_summary(&mut self, path: &Path) -> Result<(), ReportError> {
        let rows: Vec<Vec<String>> = self
            .summary
            .iter()
            .map(|(name, value)| vec![name.clone(), fmt_f64(*value)])
            .collect();
        write_csv(path, &["metric", "value"], &rows)?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_config_echo(&mut self, path: &Path) -> Result<(), ReportError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{}", self.config_echo).map_err(|e| io_err(path, e))?;
        writer.flush().map_err(|e| io_err(path, e))?;
        self.files.push(path.to_path_buf());
        Ok(())
    }
}
