//! Localization and ground-truth tables as CSV.
//!
//! Localization header: `frame,x_nm,y_nm,z_nm,photons,prob,sig_x,sig_y,sig_z`.
//! Ground-truth header: `frame,id,x_nm,y_nm,z_nm,photons`. `read_table`
//! accepts either; the 6-column truth variant fills `prob = 1` and zero
//! sigmas. Floats are written with the shortest round-trip decimal.

use smlmforge_core::table::{LocRecord, LocalizationTable, TruthRecord};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const LOC_HEADER: [&str; 9] = [
    "frame", "x_nm", "y_nm", "z_nm", "photons", "prob", "sig_x", "sig_y", "sig_z",
];
pub const TRUTH_HEADER: [&str; 6] = ["frame", "id", "x_nm", "y_nm", "z_nm", "photons"];

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("unrecognized header: expected `{}` or `{}`", LOC_HEADER.join(","), TRUTH_HEADER.join(","))]
    UnknownHeader,
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}, column `{col}`: cannot parse `{value}` as a number")]
    BadCell {
        row: usize,
        col: String,
        value: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_table(table: &[LocRecord], path: &Path) -> Result<(), TableError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", LOC_HEADER.join(","))?;
    for r in table {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.frame, r.x, r.y, r.z, r.photons, r.prob, r.sig_x, r.sig_y, r.sig_z
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth(truth: &[TruthRecord], path: &Path) -> Result<(), TableError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", TRUTH_HEADER.join(","))?;
    for r in truth {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.frame, r.id, r.x, r.y, r.z, r.photons
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_cell<T: std::str::FromStr>(
    field: &str,
    row: usize,
    col: &str,
) -> Result<T, TableError> {
    field.trim().parse().map_err(|_| TableError::BadCell {
        row,
        col: col.to_string(),
        value: field.to_string(),
    })
}

/// Read a localization table from either accepted CSV layout.
pub fn read_table(path: &Path) -> Result<LocalizationTable, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let is_loc = header == LOC_HEADER;
    let is_truth = header == TRUTH_HEADER;
    if !is_loc && !is_truth {
        // Identify which expected column is absent for a pointed message.
        let expected: &[&'static str] = if header.contains(&"prob".to_string()) || header.len() >= 7
        {
            &LOC_HEADER
        } else {
            &TRUTH_HEADER
        };
        for col in expected {
            if !header.iter().any(|h| h == col) {
                return Err(TableError::MissingColumn(col));
            }
        }
        return Err(TableError::UnknownHeader);
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2; // 1-based, counting the header line
        let get = |idx: usize, col: &str| -> Result<f64, TableError> {
            parse_cell(record.get(idx).unwrap_or(""), row, col)
        };
        if is_loc {
            out.push(LocRecord {
                frame: parse_cell(record.get(0).unwrap_or(""), row, "frame")?,
                x: get(1, "x_nm")?,
                y: get(2, "y_nm")?,
                z: get(3, "z_nm")?,
                photons: get(4, "photons")?,
                prob: get(5, "prob")?,
                sig_x: get(6, "sig_x")?,
                sig_y: get(7, "sig_y")?,
                sig_z: get(8, "sig_z")?,
            });
        } else {
            out.push(LocRecord {
                frame: parse_cell(record.get(0).unwrap_or(""), row, "frame")?,
                x: get(2, "x_nm")?,
                y: get(3, "y_nm")?,
                z: get(4, "z_nm")?,
                photons: get(5, "photons")?,
                prob: 1.0,
                sig_x: 0.0,
                sig_y: 0.0,
                sig_z: 0.0,
            });
        }
    }
    Ok(out)
}
