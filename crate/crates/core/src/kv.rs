//! Flat `key=value` text used by experiment configs and dataset headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed pairs; every lookup removes its key so leftovers can be rejected.
#[derive(Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    /// Parses `key=value` lines. Blank lines and `#` comments are skipped.
    /// `base` is added to reported byte offsets.
    pub fn parse(text: &str, base: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = base;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() && !body.starts_with('#') {
                let Some((k, v)) = body.split_once('=') else {
                    return Err(Error::parse(offset, format!("expected key=value, got {body:?}")));
                };
                let key = k.trim().to_string();
                if entries.insert(key.clone(), (v.trim().to_string(), offset)).is_some() {
                    return Err(Error::parse(offset, format!("duplicate key {key:?}")));
                }
            }
            offset += line.len();
        }
        Ok(Self { entries })
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, off)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::parse(off, format!("{key}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?.ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (_, off))) = self.entries.into_iter().min_by_key(|(_, (_, off))| *off) {
            return Err(Error::parse(off, format!("unknown key {key:?}")));
        }
        Ok(())
    }
}

/// Accumulates `key=value` lines in insertion order.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(key);
        self.out.push('=');
        self.out.push_str(&value.to_string());
        self.out.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}
