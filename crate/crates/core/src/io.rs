//! CSV and JSON file helpers. Every write goes through a temp file in the
//! destination directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{OvError, Result};
use crate::tensor::Matrix;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| OvError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| OvError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| OvError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| OvError::io(path, e))?;
    tmp.persist(path).map_err(|e| OvError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| OvError::parse(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OvError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| OvError::parse(path, e.to_string()))
}

/// Headerless CSV, one row per line.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    OvError::parse(path, format!("line {}: not a number: {field:?}", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(OvError::parse(
                    path,
                    format!(
                        "line {}: {} fields, expected {}",
                        line + 1,
                        row.len(),
                        first.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

fn csv_error(path: &Path, e: csv::Error) -> OvError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => OvError::io(path, io),
        other => OvError::parse(path, format!("{other:?}")),
    }
}

pub fn matrix_csv_string(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            // `{}` on f64 prints the shortest string that parses back exactly
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, matrix_csv_string(m).as_bytes())
}

/// One integer per line; blank lines are ignored. Values are returned raw so
/// the caller can report range errors against its class count.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, i64)>> {
    let text = fs::read_to_string(path).map_err(|e| OvError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: i64 = t
            .parse()
            .map_err(|_| OvError::parse(path, format!("line {}: not an integer: {t:?}", i + 1)))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m =
            Matrix::from_rows(&[vec![0.1, -1e-300, 3.0], vec![1.0 / 3.0, 2.5e10, -0.0]]).unwrap();
        write_matrix_csv(&p, &m).unwrap();
        let back = read_matrix_csv(&p).unwrap();
        assert_eq!(back.as_slice().len(), 6);
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            assert_eq!(a.to_bits() == b.to_bits() || (a == b), true);
        }
    }

    #[test]
    fn ragged_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
        fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(OvError::Parse { .. })));
        assert!(matches!(
            read_matrix_csv(&dir.path().join("missing.csv")),
            Err(OvError::Io { .. })
        ));
    }
}
