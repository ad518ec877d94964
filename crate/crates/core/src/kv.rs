//! Line-oriented `section.key = value` text.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries, keyed by full `section.key`.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `section.key = value`", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            match key.split_once('.') {
                Some((section, name)) if !section.is_empty() && !name.is_empty() => {}
                _ => {
                    return Err(Error::config(format!(
                        "line {}: key `{key}` is not of the form section.key",
                        lineno + 1
                    )))
                }
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::config(format!("`{key} = {v}`: {e}")))
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    /// Keys under `section.` only.
    pub fn section(&self, section: &str) -> KvMap {
        let prefix = format!("{section}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: KvMap) {
        self.entries.extend(other.entries);
    }

    /// Serialises in key order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KvMap::parse("# exp\n\nmodel.gru_hidden = 32\n  train.lr=0.001  \n").unwrap();
        assert_eq!(kv.get("model.gru_hidden"), Some("32"));
        assert_eq!(kv.parsed::<f64>("train.lr").unwrap(), Some(0.001));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvMap::parse("model.x 3").is_err());
        assert!(KvMap::parse("nosection = 3").is_err());
        assert!(KvMap::parse("a.b = 1\na.b = 2").is_err());
    }

    #[test]
    fn text_round_trip() {
        let kv = KvMap::parse("b.y = 2\na.x = hello world\n").unwrap();
        let again = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(kv.to_text(), again.to_text());
    }
}
