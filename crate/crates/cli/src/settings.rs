//! The optional `key = value` config file.
//!
//! Keys are long flag names without the leading dashes. List-valued flags
//! (`data`, `meta`, `set`, `grid-set`, `inputs`) may repeat. A flag given on
//! the command line replaces the config value entirely.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use learnkt_core::{Error, Result};

const KNOWN: &[&str] = &[
    "api-model",
    "budget",
    "bkt-params",
    "chunk-size",
    "concurrency",
    "data",
    "endpoint",
    "factors",
    "generator",
    "grid",
    "grid-set",
    "holdout",
    "inputs",
    "k",
    "lesson-name",
    "meta",
    "mock",
    "model",
    "outdir",
    "policy",
    "queries",
    "rank",
    "repeats",
    "retries",
    "scale",
    "seed",
    "set",
    "shape",
    "temperature",
    "timeout",
    "token-env",
    "workers",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, Vec<String>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let k = k.trim().trim_start_matches("--");
            if !KNOWN.contains(&k) {
                return Err(format!("line {}: unknown key '{k}'", i + 1));
            }
            values.entry(k.to_string()).or_default().push(v.trim().to_string());
        }
        Ok(Self { values })
    }

    fn last(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.last()).map(String::as_str)
    }

    /// `flag` if given, otherwise the parsed config value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.last(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config value for '{key}' is invalid: '{v}'"))),
        }
    }

    pub fn list(&self, flag: Vec<String>, key: &str) -> Vec<String> {
        if !flag.is_empty() {
            return flag;
        }
        self.values.get(key).cloned().unwrap_or_default()
    }

    pub fn paths(&self, flag: Vec<PathBuf>, key: &str) -> Vec<PathBuf> {
        if !flag.is_empty() {
            return flag;
        }
        self.list(Vec::new(), key).into_iter().map(PathBuf::from).collect()
    }

    pub fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.last(key) {
            None => Ok(false),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("config value for '{key}' must be true/false, got '{v}'"))),
        }
    }
}
