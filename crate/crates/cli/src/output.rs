//! Table emission.
//!
//! CSV files start with `# common-agency <table> schema <version>`, then a
//! header row. Floats use 17 significant digits so they round-trip. JSON
//! files hold `{schema, schema_version, columns, rows}`.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) if v.is_nan() => "nan".into(),
            Cell::Float(v) if v.is_infinite() => if *v > 0.0 { "inf" } else { "-inf" }.into(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Table {
    #[serde(rename = "schema")]
    pub name: String,
    pub schema_version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(name: &str, columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.to_string(),
            schema_version: SCHEMA_VERSION,
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut buf = format!("# common-agency {} schema {}\n", self.name, self.schema_version).into_bytes();
        {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut buf);
            w.write_record(&self.columns).map_err(csv_err)?;
            for row in &self.rows {
                w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Ok(buf)
    }

    /// Writes `<dir>/<name>.csv` or `<dir>/<name>.json`.
    pub fn write(&self, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        let (ext, bytes) = match cfg.format {
            Format::Csv => ("csv", self.to_csv()?),
            Format::Json => ("json", json_bytes(self)?),
        };
        let path = cfg.output_dir.join(format!("{}.{ext}", self.name));
        fs::write(&path, bytes)?;
        Ok(path)
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| CliError::Io(e.into()))?;
    s.push(b'\n');
    Ok(s)
}

/// Writes a JSON document carrying the schema name and version.
pub fn write_json<T: Serialize>(cfg: &RunConfig, name: &str, body: &T) -> Result<PathBuf, CliError> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        schema: &'a str,
        schema_version: u32,
        #[serde(flatten)]
        body: &'a T,
    }
    let path = cfg.output_dir.join(format!("{name}.json"));
    fs::write(
        &path,
        json_bytes(&Doc {
            schema: name,
            schema_version: SCHEMA_VERSION,
            body,
        })?,
    )?;
    Ok(path)
}

pub fn write_resolved_config(cfg: &RunConfig) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot echo config: {e}")))?;
    fs::write(cfg.output_dir.join("resolved_config.toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new("demo", ["a", "b", "c"]);
        t.push(vec![1.0f64.into(), "x,y".into(), true.into()]);
        t.push(vec![(1.0f64 / 3.0).into(), "z".into(), f64::INFINITY.into()]);
        let s = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(
            s,
            "# common-agency demo schema 1\na,b,c\n1.0000000000000000e0,\"x,y\",true\n3.3333333333333331e-1,z,inf\n"
        );
        let back: f64 = "3.3333333333333331e-1".parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }
}
