//! Binary checkpoint container.
//!
//! Layout: `b"MCKP"`, format version (u32 LE), header length (u64 LE), a JSON
//! header, then every tensor listed in the header as consecutive f64 LE values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NetConfig, ParamSet, VqVae};

use super::adam::AdamState;
use super::config::{Stage, TrainConfig};

pub const CKPT_MAGIC: &[u8; 4] = b"MCKP";
pub const CKPT_VERSION: u32 = 1;

/// Hashes of the frozen stage-1 models a stage-2 run was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub oct: String,
    pub octa: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub model: AdamState,
    pub heads: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub train_config: TrainConfig,
    pub net_config: NetConfig,
    pub step: u64,
    pub params: ParamSet,
    /// Projection heads (stage 2 only).
    pub heads: Option<ParamSet>,
    pub optimizer: Option<OptimizerState>,
    pub frozen: Option<FrozenHashes>,
    pub best_val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    train_config: TrainConfig,
    net_config: NetConfig,
    step: u64,
    frozen: Option<FrozenHashes>,
    best_val_psnr: Option<f64>,
    adam_t: Option<u64>,
    heads_adam_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn push_group<'a>(entries: &mut Vec<TensorEntry>, data: &mut Vec<&'a [f64]>, group: &str, params: &'a ParamSet) {
    for (name, shape, vals) in params.iter() {
        entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: shape.to_vec(),
        });
        data.push(vals);
    }
}

fn push_moments<'a>(
    entries: &mut Vec<TensorEntry>,
    data: &mut Vec<&'a [f64]>,
    group: &str,
    params: &ParamSet,
    st: &'a AdamState,
) {
    for (k, (name, shape, _)) in params.iter().enumerate() {
        for (suffix, vals) in [("m", &st.m[k]), ("v", &st.v[k])] {
            entries.push(TensorEntry {
                group: format!("{group}.{suffix}"),
                name: name.into(),
                shape: shape.to_vec(),
            });
            data.push(vals);
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        push_group(&mut entries, &mut data, "model", &self.params);
        if let Some(h) = &self.heads {
            push_group(&mut entries, &mut data, "heads", h);
        }
        if let Some(opt) = &self.optimizer {
            if !opt.model.matches(&self.params) {
                return Err(Error::Shape("optimizer state does not match model parameters".into()));
            }
            push_moments(&mut entries, &mut data, "model", &self.params, &opt.model);
            if let (Some(hs), Some(h)) = (&opt.heads, &self.heads) {
                if !hs.matches(h) {
                    return Err(Error::Shape("optimizer state does not match head parameters".into()));
                }
                push_moments(&mut entries, &mut data, "heads", h, hs);
            }
        }
        let header = Header {
            stage: self.stage,
            train_config: self.train_config.clone(),
            net_config: self.net_config.clone(),
            step: self.step,
            frozen: self.frozen.clone(),
            best_val_psnr: self.best_val_psnr,
            adam_t: self.optimizer.as_ref().map(|o| o.model.t),
            heads_adam_t: self.optimizer.as_ref().and_then(|o| o.heads.as_ref().map(|h| h.t)),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = data.iter().map(|d| d.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];

        let mut model = ParamSet::new();
        let mut heads: Option<ParamSet> = None;
        let mut moments: [Vec<Vec<f64>>; 4] = Default::default();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(Error::Format(format!("truncated tensor {}/{}", t.group, t.name)));
            }
            let vals: Vec<f64> = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[8 * n..];
            match t.group.as_str() {
                "model" => {
                    model.add(t.name.clone(), t.shape.clone(), vals);
                }
                "heads" => {
                    heads
                        .get_or_insert_with(ParamSet::new)
                        .add(t.name.clone(), t.shape.clone(), vals);
                }
                "model.m" => moments[0].push(vals),
                "model.v" => moments[1].push(vals),
                "heads.m" => moments[2].push(vals),
                "heads.v" => moments[3].push(vals),
                g => return Err(Error::Format(format!("unknown tensor group {g:?}"))),
            }
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", payload.len())));
        }
        let [mm, mv, hm, hv] = moments;
        let optimizer = header.adam_t.map(|t| OptimizerState {
            model: AdamState { t, m: mm, v: mv },
            heads: header.heads_adam_t.map(|t| AdamState { t, m: hm, v: hv }),
        });
        if let Some(o) = &optimizer {
            if !o.model.matches(&model)
                || o.heads
                    .as_ref()
                    .is_some_and(|h| heads.as_ref().is_none_or(|p| !h.matches(p)))
            {
                return Err(Error::Format("optimizer state does not match parameters".into()));
            }
        }
        let ck = Self {
            stage: header.stage,
            train_config: header.train_config,
            net_config: header.net_config,
            step: header.step,
            params: model,
            heads,
            optimizer,
            frozen: header.frozen,
            best_val_psnr: header.best_val_psnr,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network described by this checkpoint.
    pub fn model(&self) -> Result<VqVae> {
        let mut net = VqVae::new(self.net_config.clone(), 0)?;
        net.load_params(&self.params)?;
        Ok(net)
    }

    /// SHA-256 of the model parameters.
    pub fn params_hash(&self) -> String {
        self.params.hash()
    }
}
