//! Plain `key = value` text used for configuration files and run manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Values are kept as strings until a typed getter asks
//! for them, so errors can name the key and line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse("config", format!("line {line_no}: expected `key = value`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse("config", format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::parse(
                    "config",
                    format!("line {line_no}: duplicate key `{key}`"),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed value, or `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| {
                Error::parse("config", format!("line {line}: cannot parse `{key}` from `{v}`"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| {
                        Error::parse(
                            "config",
                            format!("line {line}: bad list item `{}` in `{key}`", item.trim()),
                        )
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Rejects keys outside `known`, naming the first offender.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::parse(
                    "config",
                    format!("line {line}: unknown key `{key}`"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form: sorted keys, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, (_, v)) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

/// Formats a list of floats with shortest round-trip representation.
pub fn format_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_lists() {
        let kv = KvMap::parse("# comment\nfocal_length = 0.05\nwavelengths = 450e-9, 550e-9\n\n")
            .unwrap();
        assert_eq!(kv.get::<f64>("focal_length").unwrap(), Some(0.05));
        assert_eq!(
            kv.get_list::<f64>("wavelengths").unwrap(),
            Some(vec![450e-9, 550e-9])
        );
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn errors_name_the_line() {
        let err = KvMap::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let kv = KvMap::parse("a = 1\nb = x\n").unwrap();
        let err = kv.get::<f64>("b").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_and_unknown_keys_rejected() {
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        let kv = KvMap::parse("a = 1\nzzz = 2").unwrap();
        assert!(kv.check_known(&["a"]).is_err());
        assert!(kv.check_known(&["a", "zzz"]).is_ok());
    }

    #[test]
    fn text_roundtrip() {
        let mut kv = KvMap::new();
        kv.set("x", format_list(&[0.1, 1e-9]));
        kv.set("m", 256);
        let back = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(back.get_list::<f64>("x").unwrap().unwrap(), vec![0.1, 1e-9]);
        assert_eq!(back.to_text(), kv.to_text());
    }
}
