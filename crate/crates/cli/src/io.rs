//! Schema, CSV and JSON files.
//!
//! Numbers are written as the shortest decimal string that parses back to
//! the same binary64 value.

use std::fs;
use std::path::Path;

use mvemu::schema::{Dataset, DatasetSchema, Point, RawValue, VariableKind, VariableSchema};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &to_json(value))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_schema(path: &Path) -> CliResult<DatasetSchema> {
    read_json(path)
}

fn parse_err(path: &Path, line: u64, column: usize, message: impl Into<String>) -> CliError {
    CliError::Parse {
        file: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, 0, e.to_string())
}

/// Reads a CSV whose header names exactly the `expected` columns (any order);
/// returns, per data row, its line number and cells in `expected` order.
fn read_table(path: &Path, expected: &[String]) -> CliResult<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Usage(format!("cannot open {}: {e}", path.display())),
            _ => csv_err(path, e),
        })?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut columns = Vec::with_capacity(expected.len());
    for name in expected {
        let hits: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h == name).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [i] => columns.push(*i),
            [] => return Err(parse_err(path, 1, 0, format!("missing column `{name}`"))),
            _ => return Err(parse_err(path, 1, hits[1] + 1, format!("duplicate column `{name}`"))),
        }
    }
    if let Some((i, h)) = header.iter().enumerate().find(|(_, h)| !expected.iter().any(|e| e == h)) {
        return Err(parse_err(path, 1, i + 1, format!("unexpected column `{h}`")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, columns.iter().map(|&c| rec[c].to_string()).collect()));
    }
    Ok(rows)
}

/// Reads design inputs into internal points. Range violations are collected
/// over the whole file and reported together.
pub fn read_inputs(path: &Path, vars: &VariableSchema) -> CliResult<Vec<Point>> {
    let names: Vec<String> = vars.variables().iter().map(|v| v.name.clone()).collect();
    let header = read_header(path)?;
    let rows = read_table(path, &names)?;
    let col_of = |user: usize| header.iter().position(|h| *h == names[user]).map_or(0, |c| c + 1);
    let mut points = Vec::with_capacity(rows.len());
    let mut offending = Vec::new();
    for (line, cells) in rows {
        let mut raw = Vec::with_capacity(names.len());
        for (user, cell) in cells.iter().enumerate() {
            let value = vars
                .parse_cell(user, cell)
                .map_err(|e| parse_err(path, line, col_of(user), e.to_string()))?;
            match (&vars.variables()[user].kind, &value) {
                (VariableKind::Continuous { range: [lo, hi] }, RawValue::Number(v)) if !(v >= lo && v <= hi) => {
                    offending.push(format!("line {line} `{}` = {v} outside [{lo}, {hi}]", names[user]));
                }
                (VariableKind::Categorical { levels }, RawValue::Level(l)) if !levels.contains(l) => {
                    return Err(parse_err(
                        path,
                        line,
                        col_of(user),
                        format!("`{}` has no level `{l}` (levels: {})", names[user], levels.join(", ")),
                    ));
                }
                _ => {}
            }
            raw.push(value);
        }
        if offending.is_empty() {
            points.push(
                vars.to_point(&raw)
                    .map_err(|e| parse_err(path, line, 0, e.to_string()))?,
            );
        }
    }
    if !offending.is_empty() {
        return Err(CliError::Core(mvemu::Error::OutOfRange(format!(
            "{}: {} value(s) out of range: {}",
            path.display(),
            offending.len(),
            offending.join("; ")
        ))));
    }
    Ok(points)
}

fn read_header(path: &Path) -> CliResult<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect())
}

pub fn read_outputs(path: &Path, outputs: &[String]) -> CliResult<DMatrix<f64>> {
    let header = read_header(path)?;
    let rows = read_table(path, outputs)?;
    let mut y = DMatrix::zeros(rows.len(), outputs.len());
    for (i, (line, cells)) in rows.iter().enumerate() {
        for (j, cell) in cells.iter().enumerate() {
            let col = header.iter().position(|h| *h == outputs[j]).map_or(0, |c| c + 1);
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, *line, col, format!("`{}`: cannot parse `{cell}` as a number", outputs[j])))?;
            if !v.is_finite() {
                return Err(parse_err(path, *line, col, format!("`{}` is not finite", outputs[j])));
            }
            y[(i, j)] = v;
        }
    }
    Ok(y)
}

pub fn load_dataset(schema: &Path, inputs: &Path, outputs: &Path) -> CliResult<Dataset> {
    let schema = read_schema(schema)?;
    let points = read_inputs(inputs, &schema.variables)?;
    let y = read_outputs(outputs, &schema.outputs)?;
    if y.nrows() != points.len() {
        return Err(CliError::Mismatch(format!(
            "{} has {} rows but {} has {}",
            inputs.display(),
            points.len(),
            outputs.display(),
            y.nrows()
        )));
    }
    Ok(Dataset::new(schema, points, y)?)
}

fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn inputs_csv(vars: &VariableSchema, points: &[Point]) -> String {
    let header: Vec<String> = vars.variables().iter().map(|v| v.name.clone()).collect();
    csv_text(
        &header,
        points.iter().map(|x| {
            vars.from_point(x)
                .into_iter()
                .map(|r| match r {
                    RawValue::Number(v) => fmt_f64(v),
                    RawValue::Level(l) => l,
                })
                .collect()
        }),
    )
}

pub fn matrix_csv(header: &[String], y: &DMatrix<f64>) -> String {
    csv_text(header, (0..y.nrows()).map(|i| y.row(i).iter().map(|v| fmt_f64(*v)).collect()))
}

pub fn rows_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    csv_text(&header, rows)
}

/// Row-major nested vectors.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> CliResult<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Mismatch(format!("matrix rows must all have {cols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}
