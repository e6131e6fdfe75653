//! Flat key=value experiment configuration: one `key = value` pair per line,
//! `#` comments, later keys win. Command-line `--set key=value` overrides
//! stack on top.

use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            cfg.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(CliError::Config(format!(
                    "override must look like key=value, got {o:?}"
                )));
            };
            self.set(key.trim(), value.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.parse_or(key, default)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.parse_or(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        self.parse_or(key, default)
    }

    pub fn i32_or(&self, key: &str, default: i32) -> Result<i32, CliError> {
        self.parse_or(key, default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(CliError::Config(format!("{key}: expected a boolean, got {v:?}"))),
        }
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn list_f64_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("{key}: bad number {s:?}")))
                })
                .collect(),
        }
    }

    pub fn list_usize_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("{key}: bad integer {s:?}")))
                })
                .collect(),
        }
    }

    pub fn list_str_or(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.get(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    /// Master seed; every consumer derives its own stream from it.
    pub fn master_seed(&self) -> Result<u64, CliError> {
        self.u64_or("master_seed", 0)
    }
}
