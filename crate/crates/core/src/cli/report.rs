//! Tabular result emission as text, JSON or plot-ready CSV.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::io::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
    #[value(name = "csv-plotdata", alias = "csv")]
    CsvPlotdata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Value>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub tables: Vec<Table>,
}

impl Report {
    pub fn with(mut self, table: Table) -> Self {
        self.tables.push(table);
        self
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Report> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tables.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let cells: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(cell_text).collect()).collect();
            let widths: Vec<usize> = (0..t.columns.len())
                .map(|c| {
                    cells
                        .iter()
                        .map(|r| r[c].len())
                        .chain([t.columns[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let _ = writeln!(out, "## {}", t.name);
            let line = |vals: Vec<&str>| {
                vals.iter()
                    .zip(&widths)
                    .map(|(v, w)| format!("{v:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(out, "{}", line(t.columns.iter().map(String::as_str).collect()));
            for r in &cells {
                let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
            }
        }
        out
    }

    pub fn table_csv(table: &Table) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&table.columns)?;
        for r in &table.rows {
            w.write_record(r.iter().map(cell_text))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// CSV tables concatenated, each preceded by a `# name` line.
    pub fn to_csv_stream(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.tables {
            let _ = writeln!(out, "# {}", t.name);
            out.push_str(&String::from_utf8_lossy(&Self::table_csv(t)?));
            out.push('\n');
        }
        Ok(out)
    }

    /// Write to `out`, or to stdout when `None`. CSV output goes to one file
    /// per table inside the `out` directory.
    pub fn emit(&self, format: Format, out: Option<&Path>) -> Result<()> {
        match (format, out) {
            (Format::Text, None) => to_stdout(&self.to_text())?,
            (Format::Json, None) => to_stdout(&(self.to_json()? + "\n"))?,
            (Format::CsvPlotdata, None) => to_stdout(&self.to_csv_stream()?)?,
            (Format::Text, Some(p)) => write_atomic(p, self.to_text().as_bytes())?,
            (Format::Json, Some(p)) => write_atomic(p, self.to_json()?.as_bytes())?,
            (Format::CsvPlotdata, Some(dir)) => {
                std::fs::create_dir_all(dir)?;
                for t in &self.tables {
                    write_atomic(&dir.join(format!("{}.csv", t.name)), &Self::table_csv(t)?)?;
                }
            }
        }
        Ok(())
    }
}

/// A closed pipe downstream (e.g. `| head`) is not an error.
fn to_stdout(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(s.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// JSON value of a number; non-finite values become strings because JSON
/// has no representation for them.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

pub fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

pub fn text(s: impl Into<String>) -> Value {
    Value::String(s.into())
}
