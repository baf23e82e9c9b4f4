//! Flat `key = value` configuration files with `#` comments.
//!
//! Keys are read through typed getters that record which keys were consumed;
//! [`Config::finish`] then rejects anything left over, so a typo never falls
//! back silently to a default.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                key: s.to_string(),
                reason: format!("line {line}: expected `key = value`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config {
                    key: k.to_string(),
                    reason: format!("line {line}: malformed key"),
                });
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), line)) {
                return Err(Error::Config {
                    key: k.to_string(),
                    reason: format!("line {line}: duplicate of line {first}"),
                });
            }
        }
        Ok(Config {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inserts or replaces `key`; used for command-line overrides.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn parse_value<T: FromStr>(&self, key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse().map_err(|e: T::Err| Error::Config {
            key: key.to_string(),
            reason: format!("cannot parse `{v}`: {e}"),
        })
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(v) => self.parse_value(key, v),
            None => Ok(default),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(v) => self.parse_value(key, v),
            None => Err(Error::Config {
                key: key.to_string(),
                reason: "missing".into(),
            }),
        }
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some("") => Ok(Vec::new()),
            Some(v) => v.split(',').map(|x| self.parse_value(key, x.trim())).collect(),
            None => Ok(default),
        }
    }

    /// Rejects keys no getter asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, (_, line))) => Err(Error::Config {
                key: k.clone(),
                reason: match line {
                    0 => "unknown key (command-line override)".into(),
                    l => format!("unknown key (line {l})"),
                },
            }),
            None => Ok(()),
        }
    }
}
