use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rrdr_core::Result;
use serde::Serialize;

/// Provenance written at the top of every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fast: Option<bool>,
}

impl Metadata {
    pub fn new(command: &'static str, seed: Option<u64>, config_sha256: String) -> Self {
        Metadata {
            tool: "rrdr",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_sha256,
            fast: None,
        }
    }

    fn header_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("# {} {}", self.tool, self.version),
            format!("# command: {}", self.command),
            format!("# seed: {}", self.seed.map_or("none".into(), |s| s.to_string())),
            format!("# config_sha256: {}", self.config_sha256),
        ];
        if let Some(fast) = self.fast {
            lines.push(format!("# fast: {fast}"));
        }
        lines
    }
}

pub fn out_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}

/// Writes a `#` metadata block followed by whatever `body` emits.
pub fn write_with_header(
    path: &Path,
    meta: &Metadata,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in meta.header_lines() {
        writeln!(w, "{line}")?;
    }
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<R: Serialize>(path: &Path, meta: &Metadata, rows: &[R]) -> Result<()> {
    write_with_header(path, meta, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Non-finite numbers become JSON `null`.
pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}
