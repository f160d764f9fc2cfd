//! Reading point sets and vectors from the command line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mmhlab_core::Batch;

/// Rows of a headed CSV. Columns named `x<j>` are used when present,
/// otherwise every column must be numeric.
pub fn read_points(path: &Path) -> Result<Batch> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let coord: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            h.strip_prefix('x')
                .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
        })
        .map(|(i, _)| i)
        .collect();
    let cols: Vec<usize> = if coord.is_empty() {
        (0..headers.len()).collect()
    } else {
        coord
    };
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = cols
            .iter()
            .map(|&i| {
                let field = rec.get(i).unwrap_or("");
                field.trim().parse::<f64>().with_context(|| {
                    format!(
                        "{}: row {} column `{}` is not a number: {field:?}",
                        path.display(),
                        line + 1,
                        &headers[i]
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(Batch::from_rows(&rows)?)
}

/// Parses `1,0,0.5` into a vector.
pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("`{v}` is not a number"))
        })
        .collect()
}
