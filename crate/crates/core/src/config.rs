//! Flat `key = value` configuration files with `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keys are stored fully qualified as `section.key`; keys before any
/// section header have no prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// `#` and `;` start comments; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", n + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Overrides or adds a value (command-line flags win over the file).
    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.values.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Parsed value, or `default` when the key is absent.
    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    /// Comma-separated list, or `default` when the key is absent.
    pub fn list_or<T>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: {s:?}: {e}"))))
                .collect(),
        }
    }

    /// Errors on any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_prefix_keys() {
        let c = Config::parse("seed = 3\n[model]\nd_model = 16 # small\n\n[pretrain]\nlambda=0.5\n").unwrap();
        assert_eq!(c.get("seed"), Some("3"));
        assert_eq!(c.parse_or("model.d_model", 0usize).unwrap(), 16);
        assert_eq!(c.parse_or("pretrain.lambda", 1.0f64).unwrap(), 0.5);
        assert_eq!(c.parse_or("pretrain.stages", 4usize).unwrap(), 4);
    }

    #[test]
    fn lists_and_overrides() {
        let mut c = Config::parse("[experiment]\nseeds = 1, 2,3\n").unwrap();
        assert_eq!(c.list_or::<u64>("experiment.seeds", vec![]).unwrap(), vec![1, 2, 3]);
        c.set("experiment.seeds", "9");
        assert_eq!(c.list_or::<u64>("experiment.seeds", vec![]).unwrap(), vec![9]);
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(matches!(Config::parse("[model\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("just words\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("a = 1\na = 2\n"), Err(Error::Config(_))));
        let c = Config::parse("x = abc\n").unwrap();
        assert!(matches!(c.parse_or("x", 0u32), Err(Error::Config(_))));
        assert!(c.check_known(&["y"]).is_err());
    }
}
