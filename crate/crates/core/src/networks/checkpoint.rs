//! Single-file parameter archive.
//!
//! JSON object with a `manifest` and a `tensors` map keyed by canonical
//! parameter name (`f_s.layer1.weight`, `E`, `W`, `H.member1`,
//! `target.member2.f_q.layer2.bias`, `e_pi`, ...). Floats use the shortest
//! representation that round-trips exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionBox, ModelDims, Networks};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fileio;

pub const CHECKPOINT_FORMAT: &str = "behavior-forge-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `behavior` or `policy`.
    pub kind: String,
    pub dims: ModelDims,
    pub k: usize,
    pub m: usize,
    pub action_box: ActionBox,
    pub seed: u64,
    /// Effective configuration of the run that produced the file.
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_networks(nets: &Networks, kind: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        let tensors = nets
            .store
            .iter_sorted()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.to_string(),
                kind: kind.to_string(),
                dims: nets.dims,
                k: nets.k(),
                m: nets.m(),
                action_box: nets.policy.action_box.clone(),
                seed,
                config,
            },
            tensors,
        }
    }

    /// Parameter store with tensors inserted in name order.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, rec) in &self.tensors {
            let t = Tensor::new(rec.shape.clone(), rec.data.clone()).map_err(|e| Error::Format {
                what: "checkpoint",
                detail: format!("tensor `{name}`: {e}"),
            })?;
            store.insert(name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn to_networks(&self) -> Result<Networks> {
        let store = self.to_store()?;
        let nets = Networks::from_store(store, self.manifest.dims, self.manifest.action_box.clone())?;
        if nets.k() != self.manifest.k || nets.m() != self.manifest.m {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "manifest says K={} M={}, tensors have K={} M={}",
                    self.manifest.k,
                    self.manifest.m,
                    nets.k(),
                    nets.m()
                ),
            });
        }
        Ok(nets)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        if ck.manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unknown format `{}`", ck.manifest.format),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fileio::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fileio::read_to_string(path)?)
    }
}
