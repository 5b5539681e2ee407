//! Dataset files and CSV helpers.

use anyhow::{ensure, Context, Result};
use scoregeom::densities::DensitySpec;
use scoregeom::linalg::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_SIDECAR: &str = "dataset.json";

/// Metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub schema_version: u32,
    pub n_samples: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub density: DensitySpec,
}

/// Rust's `Display` for `f64` is the shortest string that parses back to the
/// same bits, so CSV values round-trip exactly.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let header: Vec<String> = (0..m.cols()).map(|j| format!("x{j}")).collect();
    let mut t = Table::with_header(header);
    for r in 0..m.rows() {
        t.push(m.row(r).iter().map(|&v| fmt(v)).collect());
    }
    t.write(path)
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let cols = r.headers()?.len();
    let mut entries = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == cols, "row {rows} of {} has {} fields, expected {cols}", path.display(), rec.len());
        for f in rec.iter() {
            entries.push(f.parse::<f64>().with_context(|| format!("bad number '{f}' in {}", path.display()))?);
        }
        rows += 1;
    }
    ensure!(rows > 0, "{} has no rows", path.display());
    Ok(DenseMatrix::new(rows, cols, entries)?)
}

pub struct DatasetFiles {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            csv: dir.join(DATASET_CSV),
            sidecar: dir.join(DATASET_SIDECAR),
        }
    }

    pub fn exists(&self) -> bool {
        self.csv.exists() && self.sidecar.exists()
    }

    pub fn write(&self, data: &DenseMatrix, sidecar: &DatasetSidecar) -> Result<()> {
        write_matrix(&self.csv, data)?;
        write_json(&self.sidecar, sidecar)
    }

    pub fn read(&self) -> Result<(DenseMatrix, DatasetSidecar)> {
        let sidecar: DatasetSidecar = read_json(&self.sidecar)?;
        ensure!(
            sidecar.schema_version == crate::config::CONFIG_SCHEMA_VERSION,
            "dataset schema version {} is not supported",
            sidecar.schema_version
        );
        let data = read_matrix(&self.csv)?;
        ensure!(
            data.rows() == sidecar.n_samples && data.cols() == sidecar.dim,
            "dataset is {}x{} but its sidecar says {}x{}",
            data.rows(),
            data.cols(),
            sidecar.n_samples,
            sidecar.dim
        );
        Ok((data, sidecar))
    }
}
