//! CSV ingestion: matrices with rows as variables and columns as
//! observations, and integer label files.

use nalgebra::DMatrix;
use std::path::Path;

/// Read a p×n matrix: one row per variable, comma-separated observations.
pub fn read_matrix(path: &Path, header: bool) -> Result<DMatrix<f64>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("parse error: cannot read {}: {e}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if header && lineno == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    format!(
                        "parse error: {} line {}: bad number {:?}",
                        path.display(),
                        lineno + 1,
                        cell.trim()
                    )
                })
            })
            .collect::<Result<_, _>>()?;
        if width == 0 {
            width = row.len();
        } else if row.len() != width {
            return Err(format!(
                "parse error: {} line {}: {} cells, expected {width}",
                path.display(),
                lineno + 1,
                row.len()
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() || width == 0 {
        return Err(format!("parse error: {} contains no data", path.display()));
    }
    let p = rows.len();
    Ok(DMatrix::from_fn(p, width, |i, j| rows[i][j]))
}

/// Read labels: a JSON integer array, or integers separated by newlines or commas.
pub fn read_labels(path: &Path) -> Result<Vec<usize>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("parse error: cannot read {}: {e}", path.display()))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str::<Vec<usize>>(trimmed)
            .map_err(|e| format!("parse error: {}: {e}", path.display()));
    }
    let mut labels = Vec::new();
    for token in trimmed.split(|c: char| c == ',' || c.is_whitespace()) {
        if token.is_empty() {
            continue;
        }
        labels.push(
            token
                .parse::<usize>()
                .map_err(|_| format!("parse error: {}: bad label {token:?}", path.display()))?,
        );
    }
    if labels.is_empty() {
        return Err(format!(
            "parse error: {} contains no labels",
            path.display()
        ));
    }
    Ok(labels)
}

/// Write text to a file, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
