//! Flat `key=value` text used for configuration files and the config blob
//! inside checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` lines. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", lineno + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        self.entries
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::config(format!("invalid list entry `{x}` for `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn join_list<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let kv = KeyValues::parse("# comment\nepochs = 3\nlr=0.0001\n\ndil=1,2,4\n").unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(1e-4));
        assert_eq!(kv.get_list::<usize>("dil").unwrap(), Some(vec![1, 2, 4]));
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
        assert!(kv.reject_unknown(&["epochs", "lr"]).is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
        assert!(kv.get::<usize>("lr").is_err());
    }
}
