//! `key = value` config files. Command-line flags win over file entries,
//! which win over built-in defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config file {}", p.display()))
            }
        }
    }

    /// Blank lines and `#` comments are skipped; `-` and `_` in keys are
    /// interchangeable.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = normalize(k);
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key}", i + 1);
            }
        }
        Ok(ConfigFile {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = normalize(key);
        let Some(raw) = self.entries.get(&key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.clone());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config key {key}: cannot parse {raw:?}: {e}"))
    }

    /// Flag value, else file value, else `default`.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file).unwrap_or(default))
    }

    /// Like [`resolve`](Self::resolve) for settings whose default is "unset".
    pub fn resolve_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file))
    }

    /// Errors on entries no command looked at, which are almost always typos.
    pub fn check_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            bail!("unknown config keys: {}", unknown.join(", "))
        }
    }
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}
