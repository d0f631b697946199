//! File exchange helpers: one-matrix-per-file CSV test vectors and atomic
//! report writes.

use std::fs;
use std::path::Path;

use crate::numeric::Matrix;
use crate::{Error, Result};

/// Write a matrix as CSV: a `rows,cols` header line followed by one line
/// per row. Values are formatted with the shortest representation that
/// round-trips f64 exactly.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty csv".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("header: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse("header must be rows,cols".into()));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {i}: {e}"))))
            .collect::<std::result::Result<_, _>>()?;
        if values.len() != cols {
            return Err(Error::Parse(format!("row {i}: {} values, want {cols}", values.len())));
        }
        data.extend(values);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Write bytes via a temp file in the same directory, then rename into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
