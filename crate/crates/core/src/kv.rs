//! Flat `key = value` text with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    origin: String,
}

impl KvMap {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(origin, format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::format(origin, format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            origin: origin.display().to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::format(&self.origin, format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::format(&self.origin, format!("key `{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::format(&self.origin, format!("missing key `{key}`")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::format(&self.origin, format!("key `{key}`: cannot parse `{p}`")))
            })
            .collect()
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }
}

pub fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let m = KvMap::parse("# header\na = 1 # trailing\n\nb=x,y\n", Path::new("t")).unwrap();
        assert_eq!(m.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(m.list::<String>("b").unwrap(), vec!["x", "y"]);
        assert!(m.get::<u32>("b").is_err());
        assert!(KvMap::parse("a=1\na=2", Path::new("t")).is_err());
        assert!(KvMap::parse("novalue", Path::new("t")).is_err());
    }
}
