//! Append-only metrics CSV: `epoch,phase,l_corr,l_var,val_pcc,probe_acc`.
//! Absent values are empty fields.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "epoch,phase,l_corr,l_var,val_pcc,probe_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub l_corr: Option<f64>,
    pub l_var: Option<f64>,
    pub val_pcc: Option<f64>,
    pub probe_acc: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            f(self.l_corr),
            f(self.l_var),
            f(self.val_pcc),
            f(self.probe_acc)
        )
    }
}

/// In-memory rows, mirrored to a file when one is attached.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, writing the header if the file is new or empty.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let empty = std::fs::metadata(path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
        if empty {
            std::fs::write(path, format!("{HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }
}
