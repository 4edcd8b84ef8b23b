//! JSONL record file IO: one JSON object per line, no blank lines, parse
//! errors carry the 1-based line number.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::SampleRecord;
use crate::error::{Result, TadsError};

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| TadsError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TadsError::io(path, e))?;
        let n = lineno + 1;
        if line.trim().is_empty() {
            return Err(TadsError::Parse { line: n, message: "blank line in record file".into() });
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| TadsError::Parse { line: n, message: e.to_string() })?;
        records.push(rec);
    }
    Ok(records)
}

/// Writes records one per line. Field order is fixed by the struct and map
/// keys are sorted, so identical records always produce identical bytes.
pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| TadsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| TadsError::json("record", e))?;
        writeln!(w, "{line}").map_err(|e| TadsError::io(path, e))?;
    }
    w.flush().map_err(|e| TadsError::io(path, e))
}
