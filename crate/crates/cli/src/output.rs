//! Output directory, text reports, and the artifact manifest.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Collects every file written for one run and records it in `manifest.toml`.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    artifacts: Vec<Artifact>,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through `f` and records it.
    pub fn write<F>(&mut self, name: &str, f: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
    {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
        f(&mut out)?;
        out.flush()?;
        self.artifacts.push(PathBuf::from(name));
        Ok(())
    }

    /// Records a file some other writer already produced under the root.
    pub fn record(&mut self, name: &str) {
        self.artifacts.push(PathBuf::from(name));
    }

    pub fn finish(mut self, command: &str, config: &str, config_hash: &str, seed: Option<u64>) -> anyhow::Result<()> {
        self.artifacts.sort();
        let artifacts = self
            .artifacts
            .iter()
            .map(|name| {
                let bytes = std::fs::read(self.root.join(name))?;
                Ok(Artifact {
                    path: name.to_string_lossy().replace('\\', "/"),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let manifest = Manifest {
            command,
            config,
            config_hash,
            seed,
            artifacts,
        };
        std::fs::write(self.path("manifest.toml"), toml::to_string(&manifest)?)?;
        Ok(())
    }
}

/// SHA-256 of the config text followed by the effective overrides.
pub fn config_hash(text: &str, overrides: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(b"\n--\n");
    h.update(overrides.as_bytes());
    hex::encode(h.finalize())
}

/// `key: value` lines, echoed to stdout and saved as a text artifact.
#[derive(Default)]
pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn kv(&mut self, key: &str, value: impl Display) {
        self.lines.push(format!("{key}: {value}"));
    }

    pub fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    pub fn extend(&mut self, text: &str) {
        self.lines.extend(text.lines().map(str::to_string));
    }

    pub fn save(&self, out: &mut OutDir, name: &str) -> anyhow::Result<()> {
        out.write(name, |w| {
            for l in &self.lines {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })?;
        for l in &self.lines {
            println!("{l}");
        }
        Ok(())
    }
}

/// Fixed-width scientific notation for reports.
pub fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_covers_overrides() {
        let a = config_hash("x = 1", "seed=1");
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash("x = 1", "seed=1"));
        assert_ne!(a, config_hash("x = 1", "seed=2"));
        assert_ne!(a, config_hash("x = 2", "seed=1"));
    }

    #[test]
    fn manifest_is_sorted() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut out = OutDir::create(dir.path()).unwrap();
        out.write("b.txt", |w| Ok(writeln!(w, "b")?)).unwrap();
        out.write("a/c.txt", |w| Ok(writeln!(w, "c")?)).unwrap();
        out.finish("test", "builtin", "00", None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        assert!(text.find("a/c.txt").unwrap() < text.find("b.txt").unwrap());
        assert!(!text.contains("seed"));
    }
}
