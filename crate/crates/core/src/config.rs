//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated; matrices separate rows with `;`.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::ConfigError;

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: n + 1, text: raw.to_string() });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1, text: raw.to_string() });
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries, consumed: Default::default() })
    }

    /// Sets or replaces a value, as a command-line override would.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.consumed.borrow_mut().insert(key.to_string());
        Some(v)
    }

    fn parse_one<T: FromStr>(key: &str, text: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        text.trim()
            .parse()
            .map_err(|e: T::Err| ConfigError::Value { key: key.to_string(), msg: format!("{text:?}: {e}") })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).map(|v| Self::parse_one(key, v)).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',').map(|t| Self::parse_one(key, t)).collect::<Result<_, _>>().map(Some)
    }

    pub fn get_matrix(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(';')
            .map(|row| row.split(',').map(|t| Self::parse_one(key, t)).collect::<Result<Vec<f64>, _>>())
            .collect::<Result<_, _>>()
            .map(Some)
    }

    /// Errors with every key that no accessor has read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<String> = self.entries.keys().filter(|k| !consumed.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown))
        }
    }

    /// Canonical `key = value` rendering, sorted by key.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_matrices() {
        let cfg = KvConfig::parse("# header\nseed = 7  # trailing\n\nmeans = 1,0;0,1\nmu = -2, 2\n").unwrap();
        assert_eq!(cfg.require::<u64>("seed").unwrap(), 7);
        assert_eq!(cfg.get_matrix("means").unwrap().unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(cfg.get_list::<f64>("mu").unwrap().unwrap(), vec![-2.0, 2.0]);
        cfg.finish().unwrap();
    }

    #[test]
    fn reports_unknown_and_missing_keys() {
        let cfg = KvConfig::parse("seed = 1\nbogus = 2\nother = 3").unwrap();
        let _ = cfg.get::<u64>("seed");
        match cfg.finish() {
            Err(ConfigError::UnknownKeys(k)) => assert_eq!(k, vec!["bogus".to_string(), "other".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cfg.require::<u64>("epochs"), Err(ConfigError::Missing(k)) if k == "epochs"));
        assert!(matches!(KvConfig::parse("novalue"), Err(ConfigError::Syntax { line: 1, .. })));
        let bad = KvConfig::parse("seed = x").unwrap();
        assert!(matches!(bad.get::<u64>("seed"), Err(ConfigError::Value { .. })));
    }
}
