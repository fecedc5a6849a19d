//! Output directory handling. Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// `$FLOWGUIDE_OUTDIR/<name>`, else `<output_dir>/<name>`, else `./out/<name>`.
    pub fn create(configured: Option<&Path>, base: &Path, name: &str) -> Result<Self, CliError> {
        let root = match std::env::var_os("FLOWGUIDE_OUTDIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => match configured {
                Some(p) if p.is_absolute() => p.to_path_buf(),
                Some(p) => base.join(p),
                None => PathBuf::from("out"),
            },
        };
        let root = root.join(name);
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn write_bytes(&self, file: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let target = self.path(file);
        let tmp = self.root.join(format!(".{file}.tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("json: {e}")))?;
        text.push('\n');
        self.write_bytes(file, text.as_bytes())
    }

    pub fn write_csv(&self, file: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Config(format!("csv: {e}"));
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")))?;
        self.write_bytes(file, &bytes)
    }
}

/// Shortest round-trip decimal form, so repeated runs give identical bytes.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Column names `prefix0, prefix1, ...`.
pub fn coord_columns(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("{prefix}{i}")).collect()
}
