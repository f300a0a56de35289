//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Command-line flags override
//! file values. A [`Resolver`] records every value a command consumed,
//! defaults included, so the resolved set can be written next to the outputs
//! and fed back in to repeat the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Name of the resolved config written into every run directory.
pub const RESOLVED_NAME: &str = "run_config.txt";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected `key = value`", n + 1)))?;
            let key = normalize_key(k);
            if key.is_empty() {
                return Err(Error::format("config", format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::contract(format!("config sets `{key}` twice")));
            }
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(normalize_key(key), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self` with every entry of `overrides` taking precedence.
    pub fn overridden_by(mut self, overrides: &RunConfig) -> Self {
        for (k, v) in &overrides.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Flags are spelled with dashes, file keys with either.
fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Typed, recording view over a merged [`RunConfig`].
#[derive(Debug)]
pub struct Resolver {
    source: RunConfig,
    resolved: RunConfig,
}

impl Resolver {
    pub fn new(source: RunConfig) -> Self {
        Resolver {
            source,
            resolved: RunConfig::new(),
        }
    }

    fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::contract(format!("config `{key}`: cannot parse `{raw}`")))
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>> {
        match self.source.get(key) {
            Some(raw) => {
                let v: T = Self::parse_value(key, raw)?;
                self.resolved.set(key, &v);
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T> {
        let v = self.opt(key)?.unwrap_or(default);
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| Error::contract(format!("missing required setting `{key}`")))
    }

    /// Comma-separated list; empty entries dropped.
    pub fn list(&mut self, key: &str) -> Option<Vec<String>> {
        let raw = self.source.get(key)?.to_string();
        self.resolved.set(key, &raw);
        Some(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    /// Records a value the command derived rather than read.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.resolved.set(key, value);
    }

    /// Fails on settings no part of the command consumed, then returns the
    /// resolved configuration.
    pub fn finish(self) -> Result<RunConfig> {
        let unused: Vec<&str> = self.source.keys().filter(|k| self.resolved.get(k).is_none()).collect();
        if !unused.is_empty() {
            return Err(Error::contract(format!(
                "unknown or unused setting(s): {}",
                unused.join(", ")
            )));
        }
        Ok(self.resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_dashes() {
        let c = RunConfig::parse("# run\nlabel-fraction = 0.02\n\nviews = a,b\n").unwrap();
        assert_eq!(c.get("label_fraction"), Some("0.02"));
        assert_eq!(c.get("views"), Some("a,b"));
    }

    #[test]
    fn duplicate_and_malformed() {
        assert!(RunConfig::parse("a = 1\na = 2").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig::parse("tau = 0.25\nseed = 3").unwrap();
        let mut flags = RunConfig::new();
        flags.set("tau", 1.0);
        let merged = file.overridden_by(&flags);
        assert_eq!(merged.get("tau"), Some("1"));
        assert_eq!(merged.get("seed"), Some("3"));
    }

    #[test]
    fn resolver_records_defaults_and_rejects_unused() {
        let mut r = Resolver::new(RunConfig::parse("seed = 9\nbogus = 1").unwrap());
        assert_eq!(r.get("seed", 0u64).unwrap(), 9);
        assert_eq!(r.get("tau", 0.5f64).unwrap(), 0.5);
        assert!(r.finish().is_err());

        let mut r = Resolver::new(RunConfig::parse("seed = 9").unwrap());
        r.get("seed", 0u64).unwrap();
        r.get("tau", 0.5f64).unwrap();
        let resolved = r.finish().unwrap();
        assert_eq!(resolved.to_text(), "seed = 9\ntau = 0.5\n");
    }

    #[test]
    fn bad_value_is_contract_error() {
        let mut r = Resolver::new(RunConfig::parse("seed = x").unwrap());
        assert!(matches!(r.get("seed", 0u64), Err(Error::Contract(_))));
    }
}
