//! Dataset manifests.
//!
//! ```text
//! CADUF-MANIFEST 1
//! root <directory, relative to the manifest file>
//! <id> <hr> <lr> <kernel> <klow> <scale> <noise σ> <seed>
//! ...
//! ```
//! Fields are tab-separated; artifact paths are relative to the root.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use caduf::error::{Error, Result};

const MAGIC: &str = "CADUF-MANIFEST 1";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "manifest",
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub hr: PathBuf,
    pub lr: PathBuf,
    pub kernel: PathBuf,
    pub klow: PathBuf,
    pub scale: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// As written in the file.
    pub root: PathBuf,
    /// `root` resolved against the manifest's directory.
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Manifest {
            base: root.clone(),
            root,
            entries: Vec::new(),
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base.join(rel)
    }

    pub fn format(&self) -> String {
        let mut out = format!("{MAGIC}\nroot\t{}\n", self.root.display());
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.hr.display(),
                e.lr.display(),
                e.kernel.display(),
                e.klow.display(),
                e.scale,
                e.noise,
                e.seed
            ));
        }
        out
    }

    /// Parses the text without touching the filesystem; `dir` is the manifest's directory.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim_end()) != Some(MAGIC) {
            return Err(malformed(format!("first line must be {MAGIC:?}")));
        }
        let root = match lines.next() {
            Some((_, l)) => l.strip_prefix("root\t").ok_or_else(|| malformed("second line must be `root<TAB>dir`"))?,
            None => return Err(malformed("missing root line")),
        };
        let root = PathBuf::from(root);
        let mut m = Manifest {
            base: dir.join(&root),
            root,
            entries: Vec::new(),
        };
        let mut ids = HashSet::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| malformed(format!("line {}: {what}", n + 1));
            if f.len() != 8 {
                return Err(bad(&format!("expected 8 fields, got {}", f.len())));
            }
            let scale: usize = f[5].parse().map_err(|_| bad("bad scale"))?;
            if !matches!(scale, 2 | 4) {
                return Err(bad(&format!("scale {scale} is not 2 or 4")));
            }
            let noise: f64 = f[6].parse().map_err(|_| bad("bad noise level"))?;
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(bad("noise level must be finite and non-negative"));
            }
            let seed: u64 = f[7].parse().map_err(|_| bad("bad seed"))?;
            if !ids.insert(f[0].to_string()) {
                return Err(bad(&format!("duplicate id {:?}", f[0])));
            }
            m.entries.push(ManifestEntry {
                id: f[0].to_string(),
                hr: f[1].into(),
                lr: f[2].into(),
                kernel: f[3].into(),
                klow: f[4].into(),
                scale,
                noise,
                seed,
            });
        }
        Ok(m)
    }

    /// Referenced files that do not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [&e.hr, &e.lr, &e.kernel, &e.klow])
            .map(|p| self.resolve(p))
            .filter(|p| !p.is_file())
            .collect()
    }

    /// Reads and parses a manifest; does not check the referenced files.
    pub fn read(path: &Path) -> Result<Self> {
        let text = super::read_text(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.format()).map_err(|e| super::io_error(path, e))
    }

    /// The common scale of all entries.
    pub fn scale(&self) -> Result<usize> {
        let first = self.entries.first().ok_or_else(|| malformed("no entries"))?.scale;
        if self.entries.iter().any(|e| e.scale != first) {
            return Err(malformed("entries mix scales"));
        }
        Ok(first)
    }
}
