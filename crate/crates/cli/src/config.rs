//! Experiment configuration: flags first, then an optional JSON file on top.

use std::path::{Path, PathBuf};

use octa_vq::nets::NetConfig;
use octa_vq::trainer::{TrainConfig, CKPT_VERSION};
use octa_vq::volume::{PhantomConfig, MVOL_VERSION};
use octa_vq::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the root for relative output directories.
pub const OUT_ROOT_ENV: &str = "OCTVQ_OUT_ROOT";
pub const SNAPSHOT_FILE: &str = "config.json";

/// Files a command reads or writes. Unset entries fall back to command
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub oct_checkpoint: Option<PathBuf>,
    pub octa_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Set by `--out` only; a snapshot lives inside it, so it is not serialized.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// The single seed; copied into the training and phantom configs.
    pub seed: u64,
    /// Number of subjects written by `gen-synthetic`.
    pub count: usize,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub phantom: PhantomConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 16,
            train: TrainConfig::default(),
            net: NetConfig::default(),
            phantom: PhantomConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Versions {
    octa_vq: &'static str,
    mvol_format: u8,
    checkpoint_format: u32,
}

#[derive(Debug, Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    versions: Versions,
    #[serde(flatten)]
    config: &'a ExperimentConfig,
}

impl ExperimentConfig {
    /// Applies `file` (if any) over `self`. Keys present in the file win;
    /// snapshot-only keys are ignored, so a written `config.json` can be fed
    /// back in.
    pub fn merged_with_file(self, file: Option<&Path>) -> Result<Self> {
        let Some(path) = file else {
            return Ok(self.finish());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut overlay: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Value::Object(m) = &mut overlay {
            m.remove("command");
            m.remove("versions");
        } else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut base = serde_json::to_value(&self)?;
        merge(&mut base, overlay);
        let mut cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.paths.out_dir = self.paths.out_dir;
        Ok(cfg.finish())
    }

    fn finish(mut self) -> Self {
        self.train.seed = self.seed;
        self.phantom.seed = self.seed;
        self
    }

    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = Snapshot {
            command,
            versions: Versions {
                octa_vq: octa_vq::VERSION,
                mvol_format: MVOL_VERSION,
                checkpoint_format: CKPT_VERSION,
            },
            config: self,
        };
        let path = dir.join(SNAPSHOT_FILE);
        let text = serde_json::to_string_pretty(&snap)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves an output directory against the output root, if one is set.
pub fn resolve_out(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
