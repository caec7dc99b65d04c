//! CSV readers and writers for data matrices and numeric outputs.
//!
//! Data files hold one response per row and one sample per column. A header
//! row is detected when any of its cells fails to parse as a number; a label
//! column is detected the same way on the first column of the data rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ObservationMatrix;

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// A parsed numeric table with optional labels. Missing cells are `None`.
struct RawTable {
    header: Option<Vec<String>>,
    labels: Option<Vec<String>>,
    rows: Vec<Vec<Option<f64>>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => csv_err(path, format!("{other:?}")),
        })?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e.to_string()))?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        records.push(rec.iter().map(|c| c.trim().to_string()).collect::<Vec<_>>());
    }
    if records.is_empty() {
        return Err(csv_err(path, "file contains no data rows"));
    }
    let numeric = |c: &str| c.parse::<f64>().is_ok() || is_missing(c);
    let header = if records[0].iter().any(|c| !numeric(c)) {
        Some(records.remove(0))
    } else {
        None
    };
    if records.is_empty() {
        return Err(csv_err(path, "file contains a header but no data rows"));
    }
    let has_labels = records.iter().any(|r| !r.is_empty() && !numeric(&r[0]));
    let width = records[0].len();
    let mut labels = has_labels.then(Vec::new);
    let mut rows = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.len() != width {
            return Err(csv_err(path, format!("row {} has {} fields, expected {width}", i + 1, r.len())));
        }
        let cells = if has_labels {
            labels.as_mut().unwrap().push(r[0].clone());
            &r[1..]
        } else {
            &r[..]
        };
        let mut row = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            if is_missing(cell) {
                row.push(None);
            } else {
                let v = cell
                    .parse::<f64>()
                    .map_err(|_| csv_err(path, format!("row {}, column {}: `{cell}` is not a number", i + 1, c + 1)))?;
                if !v.is_finite() {
                    return Err(csv_err(path, format!("row {}, column {}: non-finite value", i + 1, c + 1)));
                }
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    if rows[0].is_empty() {
        return Err(csv_err(path, "no numeric columns"));
    }
    let header = header.map(|h| if has_labels { h[1..].to_vec() } else { h });
    Ok(RawTable { header, labels, rows })
}

/// Read a G×n data CSV. Rows with missing cells are dropped; their 1-based
/// row numbers are returned alongside the matrix.
pub fn read_observations(path: &Path) -> Result<(ObservationMatrix, Vec<usize>)> {
    let t = read_table(path)?;
    let n = t.rows[0].len();
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if row.iter().any(|c| c.is_none()) {
            dropped.push(i + 1);
            continue;
        }
        kept.extend(row.iter().map(|c| c.unwrap()));
        if let Some(l) = &t.labels {
            labels.push(l[i].clone());
        }
    }
    let g = kept.len() / n;
    if g == 0 {
        return Err(csv_err(path, "every row has missing values"));
    }
    let m = DMatrix::from_row_slice(g, n, &kept);
    let obs = ObservationMatrix::new(m)?.with_labels(t.labels.map(|_| labels), t.header);
    Ok((obs, dropped))
}

/// Read an n×p covariate CSV. Missing cells are an error.
pub fn read_covariates(path: &Path) -> Result<DMatrix<f64>> {
    let t = read_table(path)?;
    let p = t.rows[0].len();
    let mut vals = Vec::with_capacity(t.rows.len() * p);
    for (i, row) in t.rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            vals.push(v.ok_or_else(|| csv_err(path, format!("missing covariate at row {}, column {}", i + 1, c + 1)))?);
        }
    }
    Ok(DMatrix::from_row_slice(t.rows.len(), p, &vals))
}

/// Write a matrix, one matrix row per CSV row, with optional header.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(",")).map_err(io)?;
    }
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write named columns of equal length.
pub fn write_columns(path: &Path, names: &[&str], cols: &[&[f64]]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", names.join(",")).map_err(io)?;
    let len = cols.first().map_or(0, |c| c.len());
    for i in 0..len {
        let line: Vec<String> = cols.iter().map(|c| format!("{}", c[i])).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a headerless or headed numeric CSV into a matrix (no labels, no gaps).
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_covariates(path)
}
