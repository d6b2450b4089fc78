//! CSV ingestion and output writers.

use std::fs::File;
use std::path::{Path, PathBuf};

use hetdecomp::model::{discretize, PartitionScheme};
use hetdecomp::{Dataset, Error};
use serde::Serialize;

use crate::config::{Columns, Partition};
use crate::CliError;

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_number(s: &str, column: &str, row: usize) -> Result<f64, Error> {
    if is_missing(s) {
        return Err(Error::MissingValue { column: column.into(), row });
    }
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::InvalidInput(format!("column `{column}` row {row}: `{s}` is not a finite number")))
}

/// Loaded table plus the partition used when the treatment is a dose.
pub struct Loaded {
    pub data: Dataset,
    pub partition: Option<PartitionScheme>,
    pub rows: usize,
}

/// Reads the bound columns; rows are numbered from 1 after the header.
pub fn load_csv(path: &Path, cols: &Columns, partition: Option<&Partition>) -> Result<Loaded, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::input(format!("cannot read input {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(format!("cannot read header of {}: {e}", path.display())))?
        .clone();
    let index = |name: &str| -> Result<usize, Error> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::UnknownColumn(name.into()))
    };
    let y_col = index(&cols.outcome)?;
    let t_col = index(&cols.treatment)?;
    let x_cols = cols.covariates.iter().map(|c| index(c)).collect::<Result<Vec<_>, _>>()?;
    let g_col = cols.group.as_deref().map(index).transpose()?;

    let (mut y, mut t, mut x, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CliError::input(format!("malformed CSV record {row}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        y.push(parse_number(field(y_col), &cols.outcome, row)?);
        let label = field(t_col).trim();
        if is_missing(label) {
            return Err(Error::MissingValue { column: cols.treatment.clone(), row }.into());
        }
        t.push(label.to_string());
        let xi = x_cols
            .iter()
            .zip(&cols.covariates)
            .map(|(&c, name)| parse_number(field(c), name, row))
            .collect::<Result<Vec<_>, _>>()?;
        x.push(xi);
        if let (Some(c), Some(name)) = (g_col, cols.group.as_ref()) {
            let v = field(c).trim();
            if is_missing(v) {
                return Err(Error::MissingValue { column: name.clone(), row }.into());
            }
            g.push(v.to_string());
        }
    }
    let rows = y.len();
    if rows == 0 {
        return Err(CliError::input(format!("input {} has no data rows", path.display())));
    }
    let (mut data, scheme) = match partition {
        None => (Dataset::from_labels(y, &t, x)?, None),
        Some(p) => {
            let doses = t
                .iter()
                .enumerate()
                .map(|(i, s)| parse_number(s, &cols.treatment, i + 1))
                .collect::<Result<Vec<_>, _>>()?;
            let scheme = PartitionScheme::equal_mass(&doses, p.bins, p.atoms.clone())?;
            let raw = Dataset::from_doses(y, doses, x)?;
            (discretize(&raw, &scheme)?, Some(scheme))
        }
    };
    if g_col.is_some() {
        data = data.with_group(g)?;
    }
    Ok(Loaded { data, partition: scheme, rows })
}

/// Creates `dir` and returns the path of `name` inside it.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::input(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir.join(name))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let path = output_path(dir, name)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
    let path = output_path(dir, name)?;
    let file = File::create(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(e.to_string()))?;
    Ok(path)
}

/// Hex SHA-256 of a file, recorded in manifests.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
