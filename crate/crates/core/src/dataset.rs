//! Sample/observation pairs and their CSV + JSON serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N` samples `y ∈ [-1, 1]^d` (one per row) and the observed `u(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: DMatrix<f64>,
    pub qoi: DVector<f64>,
    pub seed: u64,
    /// Amplitude of additive observation noise; zero for exact data.
    pub noise: f64,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>, qoi: DVector<f64>, seed: u64, noise: f64) -> Result<Self> {
        if samples.nrows() != qoi.len() {
            return Err(Error::Dimension(format!("{} samples vs {} observations", samples.nrows(), qoi.len())));
        }
        Ok(Self { samples, qoi, seed, noise })
    }

    pub fn len(&self) -> usize {
        self.qoi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qoi.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(idx),
            qoi: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.qoi[i])),
            seed: self.seed,
            noise: self.noise,
        }
    }

    /// CSV with header `y_1,…,y_d,u`; values carry 17 significant digits so
    /// they round-trip exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let d = self.dim();
        let header: Vec<String> = (1..=d).map(|j| format!("y_{j}")).chain(std::iter::once("u".to_string())).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> =
                self.samples.row(i).iter().chain(std::iter::once(&self.qoi[i])).map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`Dataset::write_csv`]. Seed and noise are not
    /// stored in the CSV and come back as zero.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let headers = reader.headers()?.clone();
        let cols = headers.len();
        if cols < 2 || &headers[cols - 1] != "u" {
            return Err(Error::Config(format!("{}: expected header y_1,…,y_d,u", path.display())));
        }
        let d = cols - 1;
        let mut values = Vec::new();
        let mut qoi = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != cols {
                return Err(Error::Config(format!("{}: row {} has {} fields", path.display(), line + 1, record.len())));
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("{}: row {} column {}: not a number: {field:?}", path.display(), line + 1, j + 1))
                })?;
                if j < d {
                    values.push(v);
                } else {
                    qoi.push(v);
                }
            }
        }
        let n = qoi.len();
        Dataset::new(DMatrix::from_row_slice(n, d, &values), DVector::from_vec(qoi), 0, 0.0)
    }
}

/// Sidecar record describing how an elliptic dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub d: usize,
    #[serde(rename = "L")]
    pub corr_len: f64,
    pub a_bar: f64,
    pub sigma: f64,
    pub element_count: usize,
    pub seed: u64,
    pub generator_version: String,
}

impl DatasetMetadata {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let samples = DMatrix::from_row_slice(3, 2, &[0.1, -1.0, 1.0 / 3.0, 0.7, -0.123_456_789_012_345_68, 1.0]);
        let qoi = DVector::from_vec(vec![1.25, std::f64::consts::PI, -2e-300]);
        let ds = Dataset::new(samples, qoi, 9, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("y_1,y_2,u\n"));
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.qoi, ds.qoi);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y_1,u\n0.5,abc\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path), Err(Error::Config(_))));
        std::fs::write(&path, "a,b\n0.5,1\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path), Err(Error::Config(_))));
    }

    #[test]
    fn metadata_uses_documented_keys() {
        let meta = DatasetMetadata {
            d: 14,
            corr_len: 0.2,
            a_bar: 0.1,
            sigma: 0.03,
            element_count: 64,
            seed: 1,
            generator_version: "x".into(),
        };
        let v: serde_json::Value = serde_json::to_value(&meta).unwrap();
        for key in ["d", "L", "a_bar", "sigma", "element_count", "seed", "generator_version"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        meta.write_json(&path).unwrap();
        assert_eq!(DatasetMetadata::read_json(&path).unwrap(), meta);
    }

    #[test]
    fn subset_keeps_order() {
        let ds = Dataset::new(DMatrix::from_fn(4, 1, |i, _| i as f64), DVector::from_fn(4, |i, _| 10.0 * i as f64), 0, 0.0)
            .unwrap();
        let s = ds.subset(&[3, 1]);
        assert_eq!(s.samples.as_slice(), &[3.0, 1.0]);
        assert_eq!(s.qoi.as_slice(), &[30.0, 10.0]);
    }
}
