//! Report bundles: CSV tables, optional SVG charts, canvases and a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::svg::Chart;
use crate::error::{Error, Result};
use crate::renderer::Canvas;

/// Formats a float the same way on every run (shortest round-trip form).
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// file stem
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            name: name.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, header: &str) -> Option<Vec<&str>> {
        let j = self.headers.iter().position(|h| h == header)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Config(format!("csv encoding failed for {}: {e}", self.name));
        w.write_record(&self.headers).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv flush failed for {}: {e}", self.name)))
    }
}

/// A named pass/fail verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// soft checks are reported but do not fail the run
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config_text: String,
    pub config_sha256: String,
}

impl Manifest {
    pub fn for_config(config: &ExperimentConfig) -> Self {
        let config_text = config.to_toml();
        Self {
            experiment: config.experiment.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            config_text,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub manifest: Manifest,
    pub tables: Vec<Table>,
    pub charts: Vec<Chart>,
    pub canvases: Vec<(String, Canvas)>,
    pub checks: Vec<Check>,
    /// human-readable lines printed by the CLI
    pub summary: Vec<String>,
}

impl ReportBundle {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            manifest: Manifest::for_config(config),
            tables: Vec::new(),
            charts: Vec::new(),
            canvases: Vec::new(),
            checks: Vec::new(),
            summary: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn check(&mut self, name: &str, hard: bool, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            hard,
            detail,
        });
    }

    /// `None` when the experiment asserts nothing; otherwise whether all hard checks passed.
    pub fn passed(&self) -> Option<bool> {
        let hard: Vec<_> = self.checks.iter().filter(|c| c.hard).collect();
        if hard.is_empty() {
            None
        } else {
            Some(hard.iter().all(|c| c.passed))
        }
    }

    pub fn manifest_text(&self) -> String {
        let m = &self.manifest;
        let mut s = format!(
            "experiment = {:?}\nversion = {:?}\nseed = {}\nconfig_sha256 = {:?}\n",
            m.experiment, m.version, m.seed, m.config_sha256
        );
        s.push_str("files = [");
        let files: Vec<String> = self.tables.iter().map(|t| format!("{:?}", format!("{}.csv", t.name))).collect();
        s.push_str(&files.join(", "));
        s.push_str("]\n");
        for c in &self.checks {
            s.push_str(&format!(
                "check.{} = {:?}\n",
                c.name,
                format!("{} ({}) {}", if c.passed { "pass" } else { "fail" }, if c.hard { "hard" } else { "soft" }, c.detail)
            ));
        }
        s.push_str("\n# config\n");
        s.push_str(&m.config_text);
        s
    }
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the bundle under `dir`; SVG charts only when `svg` is set.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for t in &bundle.tables {
        write(dir.join(format!("{}.csv", t.name)), &t.to_csv_bytes()?, &mut written)?;
    }
    if svg {
        for c in &bundle.charts {
            write(dir.join(format!("{}.svg", c.name)), c.render().as_bytes(), &mut written)?;
        }
    }
    for (name, canvas) in &bundle.canvases {
        let csv = dir.join(format!("{name}.csv"));
        canvas.write_csv(&csv)?;
        written.push(csv);
        if canvas.side().is_ok() {
            let pgm = dir.join(format!("{name}.pgm"));
            canvas.write_pgm(&pgm)?;
            written.push(pgm);
        }
    }
    write(dir.join("manifest.txt"), bundle.manifest_text().as_bytes(), &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new("x", &["a", "b"]);
        assert_eq!(t.to_csv_bytes().unwrap(), b"a,b\n");
    }

    #[test]
    fn manifest_hash_matches_config() {
        let cfg = ExperimentConfig::default_for(ExperimentKind::Equivalence, 5);
        let b = ReportBundle::new(&cfg);
        assert_eq!(b.manifest.config_sha256, sha256_hex(cfg.to_toml().as_bytes()));
        assert!(b.manifest_text().contains(&b.manifest.config_sha256));
        assert_eq!(b.passed(), None);
    }

    #[test]
    fn io_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"").unwrap();
        let cfg = ExperimentConfig::default_for(ExperimentKind::Equivalence, 5);
        let err = emit_report(&ReportBundle::new(&cfg), &blocker.join("sub"), false).unwrap_err();
        assert!(err.to_string().contains("file"));
    }

    #[test]
    fn floats_format_stably() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1e-12), "0.000000000001");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }
}
