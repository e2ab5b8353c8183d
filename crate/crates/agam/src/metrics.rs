//! Append-only training metric log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use agam_core::engine::LogRecord;

use crate::error::{Error, Result};

pub const HEADER: &str = "step,L_mbc,L_cas,L_sas,attn_diff,val_acc";

/// One CSV line; `val_acc` is empty for batches without validation.
pub fn format_record(r: &LogRecord) -> String {
    let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{},{},{}", r.step, r.l_mbc, r.l_cas, r.l_sas, r.attn_diff, val)
}

pub struct MetricLog {
    path: PathBuf,
    file: File,
}

impl MetricLog {
    /// Opens `path` for appending, writing the header if the file is new or
    /// empty.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricLog { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", format_record(r)).map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a log written by [`MetricLog`].
pub fn parse_log(text: &str) -> std::result::Result<Vec<LogRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(format!("metric log must start with `{HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(format!("line {}: expected 6 fields, found {}", i + 2, f.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
            Ok(LogRecord {
                step: f[0].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                l_mbc: num(f[1])?,
                l_cas: num(f[2])?,
                l_sas: num(f[3])?,
                attn_diff: num(f[4])?,
                val_acc: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}
