//! Flat key-value configuration files.
//!
//! Format: one `key = value` per line, `#` starts a comment, blank lines are
//! skipped. Readers must consume every key they understand and then call
//! [`KvReader::finish`], which rejects unknown keys.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Parsed key-value file, order preserved.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(CoreError::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(CoreError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(CoreError::Config(format!("duplicate key {key}")));
            }
            entries.push((key, value));
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read config {}: {e}", path.display())))?;
        KvFile::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: String) {
        if let Some(entry) = self.entries.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader { file: self, consumed: BTreeSet::new() }
    }

    /// Render in a canonical form (sorted keys) for effective-config echoes.
    pub fn render_sorted(&self) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort();
        let mut out = String::new();
        for (k, v) in sorted {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Typed accessor that tracks consumed keys so leftovers can be rejected.
pub struct KvReader<'a> {
    file: &'a KvFile,
    consumed: BTreeSet<String>,
}

impl<'a> KvReader<'a> {
    pub fn str_opt(&mut self, key: &str) -> Option<&'a str> {
        self.consumed.insert(key.to_string());
        self.file.get(key)
    }

    pub fn string(&mut self, key: &str, default: &str) -> String {
        self.str_opt(key).unwrap_or(default).to_string()
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Config(format!("key {key}: expected a number, got {v:?}"))),
        }
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Config(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Config(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn u32(&mut self, key: &str, default: u32) -> Result<u32> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Config(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    /// Reject any key that no reader consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KvFile::parse("# header\n\nseed = 42\nname = run_a # trailing\n").unwrap();
        assert_eq!(kv.get("seed"), Some("42"));
        assert_eq!(kv.get("name"), Some("run_a"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KvFile::parse("seed = 1\ntypo_key = 2\n").unwrap();
        let mut r = kv.reader();
        let _ = r.u64("seed", 0).unwrap();
        let err = r.finish().unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn render_is_sorted_and_stable() {
        let kv = KvFile::parse("b = 2\na = 1\n").unwrap();
        assert_eq!(kv.render_sorted(), "a = 1\nb = 2\n");
    }
}
