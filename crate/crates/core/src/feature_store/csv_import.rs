//! CSV import for tables exported by tools that cannot write the binary dumps.
//!
//! Probability and logit tables carry a header `c0,c1,...,c{C-1}`; label
//! tables a single `label` column.

use std::path::Path;

use super::{LabelVector, LogitMatrix, ProbMatrix};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {:?}", path.display(), other)),
    }
}

fn read_table(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    for (k, h) in headers.iter().enumerate() {
        if h != format!("c{k}") {
            return Err(Error::Format(format!(
                "{}: header column {k} is {h:?}, expected \"c{k}\"",
                path.display()
            )));
        }
    }
    let c = headers.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != c {
            return Err(Error::Format(format!(
                "{}: row {i} has {} fields, expected {c}",
                path.display(),
                rec.len()
            )));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {i}, column {k}: cannot parse {field:?}",
                    path.display()
                ))
            })?;
            data.push(v);
        }
        n += 1;
    }
    Ok((n, c, data))
}

/// Reads a probability table. Values are rounded to `f32`, matching what the
/// binary dump will hold, before validation.
pub fn read_prob_csv(path: impl AsRef<Path>) -> Result<ProbMatrix> {
    let path = path.as_ref();
    let (n, c, data) = read_table(path)?;
    let data = data.into_iter().map(|v| v as f32 as f64).collect();
    ProbMatrix::new(n, c, data).map_err(|e| e.context(path.display()))
}

pub fn read_logit_csv(path: impl AsRef<Path>) -> Result<LogitMatrix> {
    let path = path.as_ref();
    let (n, c, data) = read_table(path)?;
    let data = data.into_iter().map(|v| v as f32 as f64).collect();
    LogitMatrix::new(n, c, data).map_err(|e| e.context(path.display()))
}

pub fn read_label_csv(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 1 || &headers[0] != "label" {
        return Err(Error::Format(format!(
            "{}: expected a single \"label\" header column",
            path.display()
        )));
    }
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = rec.get(0).unwrap_or("");
        let l: u32 = field.parse().map_err(|_| {
            Error::Format(format!(
                "{}: row {i}: cannot parse label {field:?}",
                path.display()
            ))
        })?;
        labels.push(l as usize);
    }
    if labels.is_empty() {
        return Err(Error::Format(format!("{}: no labels", path.display())));
    }
    Ok(LabelVector::new(labels))
}
