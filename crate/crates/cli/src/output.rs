//! CSV assembly and atomic artifact writing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// A CSV table built in memory. Floats use Rust's shortest round-trip
/// formatting, which never depends on locale.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let cols: Vec<&str> = header.iter().map(|s| s.as_ref()).collect();
        Csv {
            text: cols.join(",") + "\n",
        }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        let mut line = String::new();
        for (j, c) in cells.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            match c {
                Cell::Int(n) => write!(line, "{n}").unwrap(),
                Cell::Float(x) => write!(line, "{x:?}").unwrap(),
                Cell::Text(s) => line.push_str(s),
                Cell::Empty => {}
            }
        }
        self.text.push_str(&line);
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

#[derive(Debug, Clone)]
pub enum Cell {
    Int(usize),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Float)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    files: Vec<String>,
    summary: &'a BTreeMap<String, f64>,
    config: &'a RunConfig,
}

/// Everything a command produces. Nothing touches the disk until
/// [`Artifacts::write`], which writes each file through a temporary and a
/// rename, manifest last.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
    pub summary: BTreeMap<String, f64>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn note(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write(&self, command: &str, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
        let dir = &cfg.out;
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::with_capacity(self.files.len() + 1);
        for (name, contents) in &self.files {
            written.push(write_atomic(&dir.join(name), contents)?);
        }
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            files: self.files.iter().map(|(n, _)| n.clone()).collect(),
            summary: &self.summary,
            config: cfg,
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        written.push(write_atomic(&dir.join("manifest.toml"), &text)?);
        Ok(written)
    }
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<PathBuf, CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}
