//! Flat `key=value` configuration files and the metrics CSV writer.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CONFIG_HEADER: &str = "# lafs-config v1";
pub const METRICS_HEADER: &str = "step,phase,name,value";

/// Ordered `key=value` pairs. Later assignments override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed lookup; an unparsable value is an error, an absent one is `None`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}={v} is not a valid {}", std::any::type_name::<T>()))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Canonical text form; sorted keys make it stable for hashing.
    pub fn to_text(&self) -> String {
        let mut s = format!("{CONFIG_HEADER}\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Appends `step,phase,name,value` rows; writes the header when the file is new.
#[derive(Debug)]
pub struct MetricsWriter {
    path: Option<PathBuf>,
    rows: Vec<String>,
}

impl MetricsWriter {
    pub fn to_file(path: &Path) -> Self {
        MetricsWriter { path: Some(path.to_path_buf()), rows: Vec::new() }
    }

    /// Keeps rows in memory only.
    pub fn in_memory() -> Self {
        MetricsWriter { path: None, rows: Vec::new() }
    }

    pub fn record(&mut self, step: u64, phase: &str, name: &str, value: f64) {
        // Shortest round-trip formatting is deterministic across runs.
        self.rows.push(format!("{step},{phase},{name},{value}"));
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    /// Writes buffered rows and clears the buffer.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::new();
        if fresh {
            s.push_str(METRICS_HEADER);
            s.push('\n');
        }
        for r in self.rows.drain(..) {
            s.push_str(&r);
            s.push('\n');
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::error!("failed to flush metrics: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_types() {
        let mut c = KvConfig::parse("# comment\nlr = 0.001\nsteps=10\nsteps=20\n\nname=a=b\n").unwrap();
        assert_eq!(c.get::<f32>("lr").unwrap(), Some(0.001));
        assert_eq!(c.get::<usize>("steps").unwrap(), Some(20));
        assert_eq!(c.get_str("name"), Some("a=b"));
        assert!(c.get::<usize>("lr").is_err());
        c.set("steps", 5);
        assert_eq!(c.get_or("steps", 0usize).unwrap(), 5);
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
        assert!(KvConfig::parse("novalue\n").is_err());
    }

    #[test]
    fn hash_ignores_assignment_order() {
        let a = KvConfig::parse("a=1\nb=2\n").unwrap();
        let b = KvConfig::parse("b=2\na=1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), KvConfig::parse("a=1\nb=3\n").unwrap().hash());
    }

    #[test]
    fn metrics_header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        for step in 0..2 {
            let mut m = MetricsWriter::to_file(&p);
            m.record(step, "pretrain", "loss", 0.5);
        }
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "step,phase,name,value\n0,pretrain,loss,0.5\n1,pretrain,loss,0.5\n");
    }
}
