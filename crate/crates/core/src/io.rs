//! File helpers shared by every writer: atomic replace and small CSV utilities.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("serialization: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Minimal CSV table: header names plus string rows. Lines starting with `#`
/// are collected as metadata comments.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl CsvTable {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut table = CsvTable::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                table.comments.push(c.trim().to_string());
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
            if table.header.is_empty() {
                table.header = fields;
            } else {
                if fields.len() != table.header.len() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!(
                            "expected {} fields, found {}",
                            table.header.len(),
                            fields.len()
                        ),
                    });
                }
                table.rows.push((i + 1, fields));
            }
        }
        if table.header.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing header".into(),
            });
        }
        Ok(table)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn f64_at(&self, path: &Path, row: &(usize, Vec<String>), col: usize) -> Result<f64> {
        let v: f64 = row.1[col].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: row.0,
            msg: format!("`{}` is not a number", row.1[col]),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: row.0,
                msg: format!("non-finite {}", self.header[col]),
            });
        }
        Ok(v)
    }
}

/// Formats a float so that parsing it back yields the identical bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
