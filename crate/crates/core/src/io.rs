//! CSV ingestion and emission, atomic file writes, and a JSON chain format.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PfaError, Result};
use crate::model::{Dataset, Draw, PerturbationMode, PosteriorChain};
use crate::serde_mat;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOptions {
    /// Column holding group labels; `None` reads a single group.
    pub group_column: Option<String>,
    /// Replace every value by its natural logarithm (values must be positive).
    pub log_transform: bool,
    /// Group to use as the reference; defaults to the first label seen.
    pub reference_group: Option<String>,
}

/// Reads a headered CSV into a centered dataset. Rows are numbered as in a
/// spreadsheet: the header is row 1, the first data row is row 2.
pub fn ingest_csv(path: &Path, options: &IngestOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut seen = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(prev) = seen.insert(h.as_str(), i) {
            return Err(PfaError::Data(format!(
                "duplicate header {h:?} in columns {} and {}",
                prev + 1,
                i + 1
            )));
        }
    }
    let group_idx = match &options.group_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            PfaError::Config(format!("group column {name:?} not found in header"))
        })?),
        None => None,
    };
    let var_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| Some(i) != group_idx)
        .collect();
    if var_idx.is_empty() {
        return Err(PfaError::Data("no numeric columns".into()));
    }
    let variable_names: Vec<String> = var_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        if record.len() != headers.len() {
            return Err(PfaError::Data(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (&c, name) in var_idx.iter().zip(&variable_names) {
            let cell = record[c].trim();
            let parse_error = || PfaError::Parse {
                row,
                column: name.clone(),
                value: cell.to_string(),
            };
            let mut v: f64 = cell.parse().map_err(|_| parse_error())?;
            if !v.is_finite() {
                return Err(parse_error());
            }
            if options.log_transform {
                if v <= 0.0 {
                    return Err(PfaError::Data(format!(
                        "cannot log-transform {v} at row {row}, column {name:?}"
                    )));
                }
                v = v.ln();
            }
            values.push(v);
        }
        let label = match group_idx {
            Some(g) => {
                let cell = record[g].trim();
                if cell.is_empty() {
                    return Err(PfaError::Data(format!("empty group label at row {row}")));
                }
                cell.to_string()
            }
            None => "1".to_string(),
        };
        let j = match group_names.iter().position(|g| *g == label) {
            Some(j) => j,
            None => {
                group_names.push(label);
                group_names.len() - 1
            }
        };
        labels.push(j);
    }
    let n = labels.len();
    if n < 2 {
        return Err(PfaError::Data(format!(
            "need at least two data rows, found {n}"
        )));
    }
    let p = variable_names.len();
    let matrix = DMatrix::from_row_slice(n, p, &values);
    let mut data = Dataset::new(matrix, labels, group_names, variable_names);
    if let (Some(reference), Ok(d)) = (&options.reference_group, &data) {
        data = d.clone().with_reference_group(reference);
    }
    Ok(data?.centered())
}

/// Writes `path` by creating a sibling temporary file and renaming it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| PfaError::Config(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| PfaError::Io(std::io::Error::other(e.to_string())))
}

/// A dataset as CSV: an optional group column followed by the variables.
pub fn write_dataset_csv(path: &Path, data: &Dataset, group_column: Option<&str>) -> Result<()> {
    let mut header: Vec<String> = group_column
        .map(|g| vec![g.to_string()])
        .unwrap_or_default();
    header.extend(data.variable_names().iter().cloned());
    let rows = (0..data.n()).map(|i| {
        let mut r: Vec<String> = group_column
            .map(|_| vec![data.group_names()[data.group_of()[i]].clone()])
            .unwrap_or_default();
        r.extend(data.values().row(i).iter().map(|v| format!("{v}")));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// A labelled matrix: first column holds `row_labels` under `corner`.
pub fn write_matrix_csv(
    path: &Path,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    m: &DMatrix<f64>,
) -> Result<()> {
    if row_labels.len() != m.nrows() || col_labels.len() != m.ncols() {
        return Err(PfaError::Dimension(
            "matrix labels do not match its shape".into(),
        ));
    }
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    let rows = (0..m.nrows()).map(|i| {
        let mut r = vec![row_labels[i].clone()];
        r.extend(m.row(i).iter().map(|v| format!("{v}")));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMatrix {
    pub corner: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

pub fn read_matrix_csv(path: &Path) -> Result<LabelledMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(PfaError::Data("empty matrix header".into()));
    }
    let col_labels = header[1..].to_vec();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        row_labels.push(rec.get(0).unwrap_or_default().to_string());
        for (c, name) in col_labels.iter().enumerate() {
            let cell = rec.get(c + 1).unwrap_or_default();
            values.push(cell.trim().parse::<f64>().map_err(|_| PfaError::Parse {
                row: r + 2,
                column: name.clone(),
                value: cell.to_string(),
            })?);
        }
    }
    Ok(LabelledMatrix {
        corner: header[0].clone(),
        matrix: DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &values),
        row_labels,
        col_labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDraw {
    #[serde(with = "serde_mat::matrix")]
    pub lambda: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub e: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub sigma: DVector<f64>,
    #[serde(with = "serde_mat::matrices", default)]
    pub q: Vec<DMatrix<f64>>,
    pub alpha: f64,
}

/// Posterior draws with the metadata needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredChain {
    pub mode: PerturbationMode,
    pub group_names: Vec<String>,
    pub variable_names: Vec<String>,
    /// Center subtracted from the training data; new data are shifted by it.
    #[serde(with = "serde_mat::vector")]
    pub center: DVector<f64>,
    pub draws: Vec<StoredDraw>,
}

impl StoredChain {
    pub fn from_chain(chain: &PosteriorChain, center: &DVector<f64>) -> Self {
        let draws = chain
            .draws
            .iter()
            .map(|d| StoredDraw {
                lambda: d.lambda.clone(),
                e: d.e.clone(),
                sigma: d.sigma.clone(),
                q: match chain.meta.mode {
                    PerturbationMode::Group => d.q.clone().unwrap_or_default(),
                    _ => Vec::new(),
                },
                alpha: d.alpha,
            })
            .collect();
        Self {
            mode: chain.meta.mode,
            group_names: chain.meta.group_names.clone(),
            variable_names: chain.meta.variable_names.clone(),
            center: center.clone(),
            draws,
        }
    }

    pub fn to_draws(&self) -> Vec<Draw> {
        self.draws
            .iter()
            .map(|d| Draw {
                lambda: d.lambda.clone(),
                e: d.e.clone(),
                sigma: d.sigma.clone(),
                q: (self.mode == PerturbationMode::Group).then(|| d.q.clone()),
                eta: None,
                alpha: d.alpha,
                k: d.lambda.ncols(),
            })
            .collect()
    }
}
