//! Minimal `key = value` config files: one pair per line, `#` comments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    pairs: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(|s| s.as_str())
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Format(format!("config field {key} has unparsable value {v:?}"))
            }),
        }
    }
}

impl std::fmt::Display for KvConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.pairs {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let cfg = KvConfig::parse("# settings\nalpha = 0.2\n\ntop_m = 10\n").unwrap();
        assert_eq!(cfg.get("alpha"), Some("0.2"));
        assert_eq!(cfg.parse_field::<usize>("top_m").unwrap(), Some(10));
        assert_eq!(cfg.parse_field::<usize>("missing").unwrap(), None);
        let text = cfg.to_string();
        let back = KvConfig::parse(&text).unwrap();
        assert_eq!(back.get("alpha"), Some("0.2"));
    }

    #[test]
    fn parse_reports_the_bad_line() {
        let err = KvConfig::parse("alpha = 0.2\nnonsense\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
