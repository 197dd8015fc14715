//! Metric files: CSV with a header row and JSON arrays of objects, both
//! written atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use rpg_core::training::TrainRecord;
use serde::Serialize;
use serde_json::{Map, Number, Value as Json};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Value {
    fn to_csv_field(&self) -> String {
        match self {
            Self::Int(i) => i.to_string(),
            Self::Float(x) => format_float(*x),
            Self::Bool(b) => b.to_string(),
            Self::Text(s) => s.clone(),
        }
    }

    fn to_json(&self) -> Json {
        match self {
            Self::Int(i) => Json::from(*i),
            Self::Float(x) => Number::from_f64(*x).map_or(Json::Null, Json::Number),
            Self::Bool(b) => Json::Bool(*b),
            Self::Text(s) => Json::String(s.clone()),
        }
    }
}

/// 17 significant digits, enough to parse back to the same bits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// A flat record with a fixed column order.
pub trait MetricRow {
    fn schema() -> &'static [&'static str];
    fn values(&self) -> Vec<Value>;
}

impl MetricRow for TrainRecord<f64> {
    fn schema() -> &'static [&'static str] {
        &[
            "iteration",
            "j_exact",
            "loss_mean",
            "mean_reward",
            "entropy",
            "div_to_old",
            "div_to_initial",
            "grad_norm",
            "ref_updated",
        ]
    }

    fn values(&self) -> Vec<Value> {
        vec![
            Value::Int(self.iteration as u64),
            Value::Float(self.j_exact),
            Value::Float(self.loss_mean),
            Value::Float(self.mean_reward),
            Value::Float(self.entropy),
            Value::Float(self.div_to_old),
            Value::Float(self.div_to_initial),
            Value::Float(self.grad_norm),
            Value::Bool(self.ref_updated),
        ]
    }
}

pub fn render_csv<'a, R: MetricRow + 'a>(rows: impl IntoIterator<Item = &'a R>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(format!("csv encoding failed: {e}"));
    w.write_record(R::schema()).map_err(csv_err)?;
    for row in rows {
        let values = row.values();
        debug_assert_eq!(values.len(), R::schema().len());
        w.write_record(values.iter().map(Value::to_csv_field)).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv encoding failed: {e}")))
}

pub fn render_json<'a, R: MetricRow + 'a>(rows: impl IntoIterator<Item = &'a R>) -> CliResult<Vec<u8>> {
    let array: Vec<Json> = rows
        .into_iter()
        .map(|row| {
            let obj: Map<String, Json> =
                R::schema().iter().zip(row.values()).map(|(k, v)| (k.to_string(), v.to_json())).collect();
            Json::Object(obj)
        })
        .collect();
    to_json_bytes(&array)
}

pub fn to_json_bytes<S: Serialize + ?Sized>(value: &S) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(format!("json encoding failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes `rows` to `path` in the given format.
pub fn emit_metrics<'a, R: MetricRow + 'a>(
    rows: impl IntoIterator<Item = &'a R>,
    format: Format,
    path: &Path,
) -> CliResult<()> {
    let bytes = match format {
        Format::Csv => render_csv(rows)?,
        Format::Json => render_json(rows)?,
    };
    write_atomic(path, &bytes)
}

/// Emits `<dir>/<stem>.csv` and `<dir>/<stem>.json`; returns the file names.
pub fn emit_both<R: MetricRow>(rows: &[R], dir: &Path, stem: &str) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for format in [Format::Csv, Format::Json] {
        let name = format!("{stem}.{}", format.extension());
        emit_metrics(rows, format, &dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

/// Write to a temporary file in the target directory, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}
