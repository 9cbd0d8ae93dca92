//! Output bundles: everything is rendered in memory first, then written
//! under the output directory with the manifest last.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use quasimix::{Error, Result};
use serde::Serialize;

#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_file: &'static str,
    config: serde_json::Map<String, serde_json::Value>,
    artifacts: Vec<&'a str>,
}

pub const MANIFEST: &str = "manifest.json";
pub const RUN_CONF: &str = "run.conf";

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every artifact, `run.conf` and the manifest. Files go through
    /// a temporary name and are renamed into place.
    pub fn commit(mut self, out: &Path, subcommand: &str, config: &[(String, String)]) -> Result<()> {
        self.add(RUN_CONF, crate::config::render(config));
        let manifest = Manifest {
            tool: "quasimix",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_file: RUN_CONF,
            config: config
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
            artifacts: self.names().collect(),
        };
        let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        json.push('\n');
        self.add(MANIFEST, json);

        fs::create_dir_all(out).map_err(|e| io(out, e))?;
        for (name, bytes) in &self.files {
            let path = out.join(name);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            let tmp = out.join(format!(".{}.tmp", name.replace('/', "_")));
            fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Minimal CSV builder for numeric tables.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        let mut t = Self { text: String::new() };
        t.row(header.iter().map(|s| s.to_string()));
        t
    }

    pub fn with_header(header: Vec<String>) -> Self {
        let mut t = Self { text: String::new() };
        t.row(header);
        t
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for c in cells {
            if !first {
                self.text.push(',');
            }
            first = false;
            let c = c.as_ref();
            if c.contains([',', '"', '\n']) {
                let _ = write!(self.text, "\"{}\"", c.replace('"', "\"\""));
            } else {
                self.text.push_str(c);
            }
        }
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v != 0.0 && v.is_finite() && !(1e-6..1e16).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}
