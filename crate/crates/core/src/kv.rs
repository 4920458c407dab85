//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed entries with the line each came from.
pub(crate) struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub(crate) fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(format!("line {}", i + 1), "expected `key = value`"));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(format!("line {}", i + 1), format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    /// Parses and removes `key` if present.
    pub(crate) fn get<T>(&mut self, key: &str, parse: impl FnOnce(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse(&v)
                .map(Some)
                .ok_or_else(|| Error::parse(format!("line {line}"), format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub(crate) fn set<T>(&mut self, key: &str, slot: &mut T, parse: impl FnOnce(&str) -> Option<T>) -> Result<()> {
        if let Some(v) = self.get(key, parse)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub(crate) fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::parse(format!("line {line}"), format!("unknown key `{k}`")));
        }
        Ok(())
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Option<T> {
    s.trim().parse().ok()
}

pub(crate) fn parse_bool(s: &str) -> Option<bool> {
    match s.trim() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub(crate) fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
