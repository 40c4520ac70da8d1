//! Pair manifests: one `oct_path<TAB>octa_path<TAB>subject_id` record per
//! line. Blank lines and `#` comments are ignored, except for an optional
//! `# split: train|val|test` directive. Relative paths resolve against the
//! manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_volume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub oct_path: PathBuf,
    pub octa_path: PathBuf,
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl PairManifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Split) -> Self {
        Self { entries, split }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut manifest = PairManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some(split) = comment.trim().strip_prefix("split:") {
                    manifest.split = split.parse()?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {:?}",
                    lineno + 1,
                    line
                )));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base_dir.join(p)
                }
            };
            manifest.entries.push(ManifestEntry {
                oct_path: resolve(fields[0]),
                octa_path: resolve(fields[1]),
                subject_id: fields[2].to_string(),
            });
        }
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Serializes with paths relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let mut out = format!("# split: {}\n", self.split);
        let rel = |p: &Path| p.strip_prefix(base_dir).unwrap_or(p).to_string_lossy().into_owned();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", rel(&e.oct_path), rel(&e.octa_path), e.subject_id);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn load_pair(&self, i: usize) -> Result<(Volume, Volume)> {
        let e = &self.entries[i];
        let oct = read_volume(&e.oct_path)?;
        let octa = read_volume(&e.octa_path)?;
        if oct.dims() != octa.dims() {
            return Err(Error::Shape(format!(
                "subject {}: OCT dims {:?} differ from OCTA dims {:?}",
                e.subject_id,
                oct.dims(),
                octa.dims()
            )));
        }
        Ok((oct, octa))
    }

    pub fn load_all(&self) -> Result<Vec<(Volume, Volume)>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }

    /// Decodes every referenced file and checks pair dims.
    pub fn validate(&self) -> Result<()> {
        self.load_all().map(|_| ())
    }
}
