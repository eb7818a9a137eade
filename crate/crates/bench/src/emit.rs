//! CSV/JSON emission and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::{Experiment, Mode};

/// A cell value. Floats are written to CSV with fixed precision so that
/// calibrated runs are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

/// Decimal places used for floats in CSV output.
pub const CSV_DECIMALS: usize = 4;

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.CSV_DECIMALS$}"),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
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

/// A named CSV table; `name` is the file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Rows as objects keyed by column name.
    pub fn records(&self) -> Vec<Map<String, Value>> {
        self.rows
            .iter()
            .map(|row| {
                self.columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| (c.clone(), serde_json::to_value(v).expect("cell serializes")))
                    .collect()
            })
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub mode: Mode,
    pub seed: u64,
    pub parameters: BTreeMap<String, Value>,
    /// Unit of each metric column in the main table.
    pub units: BTreeMap<String, String>,
    /// Headline metrics.
    pub summary: BTreeMap<String, Value>,
    /// Main table, written as `expN.csv`.
    pub table: Table,
    /// Extra tables: secondary views and plot series.
    pub extra: Vec<Table>,
}

impl ExperimentResult {
    pub fn new(experiment: Experiment, mode: Mode, seed: u64, table: Table) -> Self {
        Self {
            experiment,
            mode,
            seed,
            parameters: BTreeMap::new(),
            units: BTreeMap::new(),
            summary: BTreeMap::new(),
            table,
            extra: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters
            .insert(key.to_string(), serde_json::to_value(value).expect("parameter serializes"));
        self
    }

    pub fn unit(mut self, column: &str, unit: &str) -> Self {
        self.units.insert(column.to_string(), unit.to_string());
        self
    }

    pub fn metric(mut self, key: &str, value: impl Serialize) -> Self {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("metric serializes"));
        self
    }

    pub fn with_table(mut self, table: Table) -> Self {
        self.extra.push(table);
        self
    }

    /// File names this result emits, CSVs first, then the JSON.
    pub fn file_names(&self) -> Vec<String> {
        let mut names: Vec<String> = std::iter::once(&self.table)
            .chain(&self.extra)
            .map(|t| format!("{}.csv", t.name))
            .collect();
        names.push(format!("{}.json", self.experiment));
        names
    }

    pub fn to_json(&self) -> Value {
        json!({
            "experiment": self.experiment,
            "title": self.experiment.title(),
            "mode": self.mode,
            "seed": self.seed,
            "parameters": self.parameters,
            "units": self.units,
            "summary": self.summary,
            "rows": self.table.records(),
            "tables": self.extra.iter().map(|t| json!({"name": t.name, "rows": t.records()})).collect::<Vec<_>>(),
            "files": self.file_names(),
        })
    }

    /// Writes every CSV and the JSON into `dir`; returns the paths written.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for t in std::iter::once(&self.table).chain(&self.extra) {
            let p = dir.join(format!("{}.csv", t.name));
            fs::write(&p, t.to_csv())?;
            paths.push(p);
        }
        let p = dir.join(format!("{}.json", self.experiment));
        let mut text = serde_json::to_string_pretty(&self.to_json()).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&p, text)?;
        paths.push(p);
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub mode: Mode,
    pub experiments: Vec<Experiment>,
    /// Digest of the calibration constants in effect.
    pub calibration_sha256: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// Hashes `files` (relative to `dir`) and builds the manifest.
    pub fn build(
        dir: &Path,
        seed: u64,
        mode: Mode,
        experiments: Vec<Experiment>,
        calibration_sha256: String,
        files: &[PathBuf],
    ) -> io::Result<Self> {
        let mut entries = Vec::with_capacity(files.len());
        for f in files {
            let bytes = fs::read(f)?;
            let rel = f.strip_prefix(dir).unwrap_or(f);
            entries.push(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        entries.dedup_by(|a, b| a.path == b.path);
        Ok(Self {
            seed,
            mode,
            experiments,
            calibration_sha256,
            files: entries,
        })
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        let p = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&p, text)?;
        Ok(p)
    }

    pub fn load(dir: &Path) -> io::Result<Self> {
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?).map_err(io::Error::other)
    }

    /// Paths whose current content no longer matches the recorded digest.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|e| fs::read(dir.join(&e.path)).map(|b| sha256_hex(&b) != e.sha256).unwrap_or(true))
            .map(|e| e.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result() -> ExperimentResult {
        let mut t = Table::new("exp6", &["batch_size", "throughput_rps", "label"]);
        t.push(vec![1usize.into(), 2857.142857.into(), "a,b".into()]);
        let mut plot = Table::new("exp6_throughput", &["batch_size", "throughput_rps"]);
        plot.push(vec![1usize.into(), 2857.1.into()]);
        ExperimentResult::new(Experiment::Exp6, Mode::Calibrated, 42, t)
            .param("records", 1000)
            .with_table(plot)
    }

    #[test]
    fn csv_is_fixed_precision_and_quoted() {
        let csv = result().table.to_csv();
        assert_eq!(csv, "batch_size,throughput_rps,label\n1,2857.1429,\"a,b\"\n");
    }

    #[test]
    fn manifest_lists_every_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let r = result();
        let paths = r.write(dir.path()).unwrap();
        assert_eq!(paths.len(), r.file_names().len());
        let m = Manifest::build(dir.path(), 42, Mode::Calibrated, vec![Experiment::Exp6], "x".into(), &paths).unwrap();
        m.write(dir.path()).unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let listed: Vec<&str> = loaded.files.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(listed, ["exp6.csv", "exp6.json", "exp6_throughput.csv"]);
        assert!(loaded.mismatches(dir.path()).is_empty());
        fs::write(dir.path().join("exp6.csv"), "tampered").unwrap();
        assert_eq!(loaded.mismatches(dir.path()), ["exp6.csv"]);
    }
}
