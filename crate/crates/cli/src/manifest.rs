//! Run manifests: one key=value text file per command invocation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use orthovit::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

pub struct Manifest {
    entries: BTreeMap<String, String>,
    started: Instant,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("command".into(), command.into());
        entries.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        let argv: Vec<String> = std::env::args().collect();
        entries.insert("argv".into(), argv.join(" "));
        Manifest {
            entries,
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        self.entries.insert(key.into(), value);
    }

    pub fn config<K: AsRef<str>>(&mut self, kv: impl IntoIterator<Item = (K, String)>) {
        for (k, v) in kv {
            self.set(format!("config.{}", k.as_ref()), v);
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.set(format!("input.{role}.path"), path.display());
        self.set(format!("input.{role}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, role: &str, path: &Path) -> Result<()> {
        self.set(format!("artifact.{role}.path"), path.display());
        self.set(format!("artifact.{role}.sha256"), sha256_file(path)?);
        Ok(())
    }

    /// Writes `manifest.txt` into `dir` and returns its path.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.set("wall_clock_s", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        let mut text = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

/// Parses key=value text; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value, found {line:?}", origin.display(), n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn kv_parsing_skips_comments() {
        let kv = parse_kv("# c\n\nepochs = 3\nbase_lr=0.1\n", Path::new("x")).unwrap();
        assert_eq!(kv["epochs"], "3");
        assert_eq!(kv["base_lr"], "0.1");
        assert!(parse_kv("nonsense\n", Path::new("x")).is_err());
    }

    #[test]
    fn manifest_is_sorted_key_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("test");
        m.set("seed", 7);
        let path = m.write(dir.path()).unwrap();
        let kv = parse_kv(&std::fs::read_to_string(path).unwrap(), Path::new("m")).unwrap();
        assert_eq!(kv["command"], "test");
        assert_eq!(kv["seed"], "7");
        assert!(kv.contains_key("wall_clock_s"));
    }
}
