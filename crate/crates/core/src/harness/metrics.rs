//! CSV metrics with a fixed header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: header.len(),
        };
        w.line(&header.join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    /// A row of preformatted fields.
    pub fn record(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::InvalidArgument(format!(
                "metrics row has {} fields, header has {}",
                fields.len(),
                self.columns
            )));
        }
        self.line(&fields.join(","))
    }

    /// `step` followed by numeric values in shortest round-trip form.
    pub fn record_step(&mut self, step: usize, values: &[f64]) -> Result<()> {
        let mut fields = vec![step.to_string()];
        fields.extend(values.iter().map(|v| v.to_string()));
        self.record(&fields)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads a metrics CSV back as a header and numeric rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("{}: non-numeric field `{f}`", path.display())))
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((header, rows))
}
