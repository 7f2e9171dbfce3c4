//! Artifact files: collected in memory and written together at the end of a run.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Resolved;
use crate::error::{CliError, CliResult};

pub struct Artifacts {
    dir: PathBuf,
    stem: String,
    header: String,
    config: serde_json::Value,
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config: &'a serde_json::Value,
    config_hash: &'a str,
    result: &'a T,
}

impl Artifacts {
    pub fn new(dir: &Path, resolved: &Resolved) -> CliResult<Artifacts> {
        let hash = resolved.hash();
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            stem: format!("{}-{hash}", resolved.subcommand),
            header: format!("# mixmed {} config={hash} seed={}\n", resolved.subcommand, resolved.seed),
            config: serde_json::to_value(resolved).map_err(|e| CliError::Config(e.to_string()))?,
            files: Vec::new(),
        })
    }

    fn name(&self, suffix: &str, ext: &str) -> String {
        if suffix.is_empty() {
            format!("{}.{ext}", self.stem)
        } else {
            format!("{}-{suffix}.{ext}", self.stem)
        }
    }

    /// JSON with the resolved config embedded next to `result`.
    pub fn json<T: Serialize>(&mut self, suffix: &str, result: &T) -> CliResult<()> {
        let hash = &self.stem[self.stem.len() - 12..];
        let env = Envelope { config: &self.config, config_hash: hash, result };
        let mut bytes = serde_json::to_vec_pretty(&env).map_err(|e| CliError::Config(e.to_string()))?;
        bytes.push(b'\n');
        self.files.push((self.name(suffix, "json"), bytes));
        Ok(())
    }

    /// CSV with a leading `#` provenance line.
    pub fn csv(&mut self, suffix: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut bytes = self.header.clone().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut bytes);
            w.write_record(header).map_err(mixmed::Error::from)?;
            for r in rows {
                w.write_record(r).map_err(mixmed::Error::from)?;
            }
            w.flush().map_err(mixmed::Error::from)?;
        }
        self.files.push((self.name(suffix, "csv"), bytes));
        Ok(())
    }

    /// CSV from serializable records, with the provenance line.
    pub fn csv_records<T: Serialize>(&mut self, suffix: &str, records: &[T]) -> CliResult<()> {
        let mut bytes = self.header.clone().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut bytes);
            for r in records {
                w.serialize(r).map_err(mixmed::Error::from)?;
            }
            w.flush().map_err(mixmed::Error::from)?;
        }
        self.files.push((self.name(suffix, "csv"), bytes));
        Ok(())
    }

    pub fn text(&mut self, suffix: &str, ext: &str, body: String) {
        self.files.push((self.name(suffix, ext), body.into_bytes()));
    }

    /// Writes every collected file; returns their paths.
    pub fn commit(self) -> CliResult<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let mut out = Vec::new();
        for (name, bytes) in self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
