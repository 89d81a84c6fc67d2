//! Flat key=value run configuration files.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Later
//! assignments win so command-line overrides can append.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct RunFile {
    map: BTreeMap<String, String>,
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RunFile { map })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        RunFile::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, str::parse::<usize>)
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, str::parse::<u64>)
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, str::parse::<f64>)
    }

    pub fn u64_list(&self, key: &str) -> Result<Option<Vec<u64>>> {
        self.parse_with(key, |s| {
            s.split(',')
                .map(|p| p.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
        })
    }

    pub fn str_list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key)
            .map(|s| s.split(',').map(|p| p.trim().to_string()).collect())
    }

    fn parse_with<T, E: std::fmt::Display>(
        &self,
        key: &str,
        parse: impl Fn(&str) -> std::result::Result<T, E>,
    ) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => parse(v)
                .map(Some)
                .map_err(|e| Error::Parse(format!("key {key}: {e}"))),
        }
    }

    /// Render back to the canonical sorted key=value form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
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
    fn parses_comments_blank_lines_and_overrides() {
        let f = RunFile::parse("# run\nepochs = 12\n\nseed=3 # trailing\nepochs=20\n").unwrap();
        assert_eq!(f.usize("epochs").unwrap(), Some(20));
        assert_eq!(f.u64("seed").unwrap(), Some(3));
        assert_eq!(f.get("missing"), None);
    }

    #[test]
    fn rejects_missing_equals_and_bad_numbers() {
        assert!(RunFile::parse("epochs").is_err());
        let f = RunFile::parse("epochs=soon").unwrap();
        assert!(f.usize("epochs").is_err());
    }

    #[test]
    fn lists_split_on_commas() {
        let f = RunFile::parse("seeds=1, 2,3\nkinds=bilinear, unitary\n").unwrap();
        assert_eq!(f.u64_list("seeds").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(
            f.str_list("kinds").unwrap(),
            vec!["bilinear".to_string(), "unitary".to_string()]
        );
    }
}
