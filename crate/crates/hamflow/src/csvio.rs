//! Shared CSV plumbing: exact float formatting and strict row parsing.

use crate::error::{Error, Result};

/// 17 significant digits — enough for any f64 to survive a write/read cycle
/// bit-for-bit.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parse one field; `line` is the 1-based file line for error reporting.
pub(crate) fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid float '{}'", field.trim()),
    })
}

/// Split a row and require an exact field count.
pub(crate) fn split_row(row: &str, expected: usize, line: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != expected {
        return Err(Error::Parse {
            line,
            message: format!("expected {} fields, got {}", expected, fields.len()),
        });
    }
    Ok(fields)
}

/// Write a file through a `.partial` sibling plus rename, so a crash cannot
/// leave a truncated file at the destination.
pub(crate) fn write_file_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = std::path::PathBuf::from(partial);
    std::fs::write(&partial, bytes)?;
    std::fs::rename(&partial, path)?;
    Ok(())
}
