//! Matrix containers, column normalization and delimited-text IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw `n x p` data: rows are subjects, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    subject_ids: Vec<String>,
    feature_ids: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let subject_ids = (1..=values.nrows()).map(|i| format!("s{i}")).collect();
        let feature_ids = (1..=values.ncols()).map(|j| format!("f{j}")).collect();
        Self::with_ids(values, subject_ids, feature_ids)
    }

    pub fn with_ids(
        values: DMatrix<f64>,
        subject_ids: Vec<String>,
        feature_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 2 || p < 1 {
            return Err(Error::InvalidArgument(format!(
                "data matrix must have at least 2 rows and 1 column, got {n}x{p}"
            )));
        }
        if subject_ids.len() != n || feature_ids.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} subject ids and {} feature ids for a {n}x{p} matrix",
                subject_ids.len(),
                feature_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "data matrix entry ({}, {})",
                pos % n + 1,
                pos / n + 1
            )));
        }
        Ok(Self {
            values,
            subject_ids,
            feature_ids,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    /// Column sub-matrix, keeping ids. `cols` are 0-based and kept in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::InvalidArgument("empty column selection".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.ncols()) {
            return Err(Error::InvalidArgument(format!(
                "column {bad} out of range for {} features",
                self.ncols()
            )));
        }
        Ok(Self {
            values: self.values.select_columns(cols),
            subject_ids: self.subject_ids.clone(),
            feature_ids: cols.iter().map(|&c| self.feature_ids[c].clone()).collect(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        Self::with_ids(
            self.values.transpose(),
            self.feature_ids.clone(),
            self.subject_ids.clone(),
        )
    }
}

/// Standard-deviation denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMode {
    /// Divide by `n`.
    Population,
    /// Divide by `n - 1`.
    #[default]
    Sample,
}

impl SdMode {
    fn denominator(self, n: usize) -> f64 {
        match self {
            SdMode::Population => n as f64,
            SdMode::Sample => (n - 1) as f64,
        }
    }
}

/// Mean and standard deviation of a slice.
pub fn mean_sd(xs: &[f64], mode: SdMode) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / mode.denominator(n)).sqrt())
}

/// Column-standardized data. Column `c` of `values` is original feature `retained[c]`.
#[derive(Debug, Clone)]
pub struct NormalizedMatrix {
    pub values: DMatrix<f64>,
    pub col_means: Vec<f64>,
    pub col_sds: Vec<f64>,
    pub retained: Vec<usize>,
    pub dropped_features: Vec<usize>,
    pub sd_mode: SdMode,
}

impl NormalizedMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

fn is_zero_spread(mean: f64, sd: f64) -> bool {
    sd <= 16.0 * f64::EPSILON * mean.abs().max(1.0)
}

/// Subtract each column's mean and divide by its standard deviation.
///
/// Constant columns are removed and listed in `dropped_features`.
pub fn normalize_columns(x: &DataMatrix, sd_mode: SdMode) -> Result<NormalizedMatrix> {
    let n = x.nrows();
    let mut retained = Vec::with_capacity(x.ncols());
    let mut dropped = Vec::new();
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for (j, col) in x.values().column_iter().enumerate() {
        let col = col.as_slice();
        let (m, s) = mean_sd(col, sd_mode);
        if is_zero_spread(m, s) {
            dropped.push(j);
        } else {
            retained.push(j);
            means.push(m);
            sds.push(s);
        }
    }
    if retained.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if !dropped.is_empty() {
        warn!(
            "dropped {} zero-variance feature(s) before normalization",
            dropped.len()
        );
    }
    let mut values = DMatrix::zeros(n, retained.len());
    for (c, &j) in retained.iter().enumerate() {
        let src = x.values().column(j);
        let (m, s) = (means[c], sds[c]);
        for (dst, v) in values.column_mut(c).iter_mut().zip(src.iter()) {
            *dst = (v - m) / s;
        }
    }
    Ok(NormalizedMatrix {
        values,
        col_means: means,
        col_sds: sds,
        retained,
        dropped_features: dropped,
        sd_mode,
    })
}

/// Integer class labels in `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    k: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l == 0 || l > k) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at position {} outside 1..={k}",
                i + 1
            )));
        }
        Ok(Self { labels, k })
    }

    /// K taken as the largest label present.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(0);
        Self::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn detect_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Read a comma- or tab-delimited numeric matrix.
///
/// With `transpose`, file rows are features and file columns are subjects.
/// Row and column numbers in diagnostics are 1-based positions in the file.
pub fn load_matrix(path: &Path, transpose: bool, has_header: bool) -> Result<DataMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let Some(first) = first else {
        return Err(Error::EmptyFile { path: path.into() });
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(first))
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if has_header && header.is_none() {
            header = Some(record.iter().map(str::to_owned).collect());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                path: path.into(),
                row: line,
                expected,
                found: record.len(),
            });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::ParseCell {
                        path: path.into(),
                        row: line,
                        col: c + 1,
                        cell: cell.to_owned(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let Some(ncols) = width else {
        return Err(Error::EmptyFile { path: path.into() });
    };
    if let Some(h) = &header {
        if h.len() != ncols {
            return Err(Error::RaggedRow {
                path: path.into(),
                row: 1,
                expected: ncols,
                found: h.len(),
            });
        }
    }
    let nrows = rows.len();
    let file_matrix = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    let col_ids: Vec<String> = header.unwrap_or_else(|| (1..=ncols).map(|j| format!("f{j}")).collect());
    if transpose {
        let subject_ids = col_ids;
        let feature_ids = (1..=nrows).map(|i| format!("f{i}")).collect();
        DataMatrix::with_ids(file_matrix.transpose(), subject_ids, feature_ids)
    } else {
        let subject_ids = (1..=nrows).map(|i| format!("s{i}")).collect();
        DataMatrix::with_ids(file_matrix, subject_ids, col_ids)
    }
}

/// Write rows as comma-separated values with shortest round-trip formatting.
pub fn write_matrix_to<W: Write>(out: &mut W, values: &DMatrix<f64>, header: Option<&[String]>) -> std::io::Result<()> {
    if let Some(h) = header {
        writeln!(out, "{}", h.join(","))?;
    }
    for row in values.row_iter() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.write_all(b",")?;
            }
            first = false;
            write!(out, "{v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Atomically write `x` (rows = subjects) to `path`.
pub fn write_matrix(path: &Path, x: &DataMatrix, with_header: bool) -> Result<()> {
    write_atomic(path, |w| {
        write_matrix_to(w, x.values(), with_header.then_some(x.feature_ids()))
    })
}

/// Write through a temp file in the destination directory, then rename.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<&mut tempfile::NamedTempFile>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(&mut tmp);
        body(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One positive integer label per line.
pub fn load_labels(path: &Path) -> Result<LabelVector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        let v = cell.parse::<usize>().map_err(|_| Error::ParseCell {
            path: path.into(),
            row: i + 1,
            col: 1,
            cell: cell.to_owned(),
        })?;
        labels.push(v);
    }
    if labels.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    LabelVector::from_labels(labels)
}
