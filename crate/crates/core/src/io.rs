//! CSV and JSON artifact helpers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{RegionMask, ScalarField};

/// Writes one or more fields on a shared grid in long format: `t,x,<names...>`.
pub fn write_fields_csv(path: &Path, columns: &[(&str, &ScalarField)]) -> Result<()> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::InvalidArgument("no columns to write".into()));
    };
    for (_, f) in &columns[1..] {
        first.check_same_grid(f)?;
    }
    let grid = first.grid();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for (k, &t) in grid.ts().iter().enumerate() {
        for (i, &x) in grid.xs().iter().enumerate() {
            rec.clear();
            rec.push(fmt(t));
            rec.push(fmt(x));
            rec.extend(columns.iter().map(|(_, f)| fmt(f.get(k, i))));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a region mask in long format: `t,x,region`.
pub fn write_mask_csv(path: &Path, mask: &RegionMask) -> Result<()> {
    let grid = mask.grid();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "region"])?;
    for (k, &t) in grid.ts().iter().enumerate() {
        for (i, &x) in grid.xs().iter().enumerate() {
            let r = if mask.is_stopping(k, i) { "STOPPING" } else { "CONTINUATION" };
            w.write_record([fmt(t), fmt(x), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes serde records (one row per item) with a header taken from the
/// field names.
pub fn write_records_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes column vectors of equal length under the given header.
pub fn write_columns_csv(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.len());
    if header.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("ragged columns".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| fmt(c[i])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads a two-column numeric CSV. A non-numeric first row is taken as a
/// header and skipped.
pub fn read_two_column_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Config(format!(
                "{}: line {} has {} columns, expected 2",
                path.display(),
                line + 1,
                rec.len()
            )));
        }
        match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => {
                xs.push(x);
                ys.push(y);
            }
            _ if line == 0 => continue,
            _ => {
                return Err(Error::Config(format!(
                    "{}: line {} is not numeric",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    Ok((xs, ys))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest round-trip decimal representation.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}
