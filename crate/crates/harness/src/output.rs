//! CSV and JSON writers. Numbers use Rust's shortest round-trip formatting
//! so reruns are byte-identical.

use std::path::Path;

use serde::Serialize;

use crate::HarnessError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())))?;
    let out = |r: csv::Result<()>| r.map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())));
    out(w.write_record(header))?;
    for r in rows {
        out(w.write_record(r))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Output(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
