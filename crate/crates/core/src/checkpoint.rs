//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! tensors' entries as raw little-endian f64 at the offsets the header lists
//! (relative to the start of the data section).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TuningMode};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::train::select_trainable;

pub const FORMAT: &str = "ecglab-checkpoint-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Lora,
    Partial,
    Frozen,
    Full,
    /// Adapters folded into their host weights.
    Merged,
}

impl From<TuningMode> for CheckpointKind {
    fn from(m: TuningMode) -> Self {
        match m {
            TuningMode::Lora => CheckpointKind::Lora,
            TuningMode::Partial => CheckpointKind::Partial,
            TuningMode::Frozen => CheckpointKind::Frozen,
            TuningMode::Full => CheckpointKind::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures the parameters `mode` trains.
    pub fn capture(model: &MultimodalModel, config: &RunConfig, mode: TuningMode) -> Result<Self> {
        let names = select_trainable(model, mode)?;
        let tensors = names
            .iter()
            .map(|n| Ok((n.clone(), plain(model.params.tensor(n)?))))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            kind: mode.into(),
            config: config.clone(),
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            format: FORMAT.into(),
            kind: self.kind,
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("serializable");
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(8..8 + len)
            .ok_or_else(|| bad(format!("header of {len} bytes runs past end of file")))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        let data = &bytes[8 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 8 * n)
                .ok_or_else(|| bad(format!("tensor {} runs past end of file", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(values, &e.shape).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Rebuilds the model: deterministic initialisation from the stored
    /// configuration, adapters attached for lora checkpoints, then every
    /// stored tensor written over its parameter.
    pub fn restore(&self) -> Result<MultimodalModel> {
        let mut model = MultimodalModel::new(&self.config.model)?;
        if self.kind == CheckpointKind::Lora {
            model.attach_lora(&self.config.lora)?;
        }
        for (name, t) in &self.tensors {
            let slot = model.params.tensor_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} is {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone().with_requires_grad(slot.requires_grad());
        }
        Ok(model)
    }

    /// Folds the adapters of a lora checkpoint into their hosts. The result
    /// stores every adapted host weight plus the other tensors the lora
    /// checkpoint carried (trained gates).
    pub fn merged(&self) -> Result<Checkpoint> {
        if self.kind != CheckpointKind::Lora {
            return Err(Error::State(format!(
                "a {:?} checkpoint has no adapters to merge",
                self.kind
            )));
        }
        let mut model = self.restore()?;
        model.merge_lora()?;
        let state = model.lora.as_ref().expect("restored with adapters");
        let mut tensors = Vec::new();
        for (name, p) in model.params.iter() {
            let keep = state.hosts.contains_key(name)
                || (!matches!(p.kind, ParamKind::LoraA | ParamKind::LoraB)
                    && self.tensors.iter().any(|(n, _)| n == name));
            if keep {
                tensors.push((name.to_string(), plain(&p.tensor)));
            }
        }
        Ok(Checkpoint {
            kind: CheckpointKind::Merged,
            config: self.config.clone(),
            tensors,
        })
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.data().to_vec(), t.shape()).expect("valid tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::prepare_model;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.vision.image_size = 32;
        cfg.model.vision.patch_size = 8;
        cfg.model.vision.embed_dim = 8;
        cfg.model.vision.heads = 2;
        cfg.model.lm.hidden_dim = 8;
        cfg.model.lm.heads = 2;
        cfg.lora.rank = 2;
        cfg.lora.alpha = 4.0;
        cfg
    }

    #[test]
    fn round_trip_bytes() {
        let cfg = tiny();
        let mut model = prepare_model(&cfg, TuningMode::Lora).unwrap();
        for (_, p) in model.params.iter_mut() {
            if p.kind == ParamKind::LoraB {
                p.tensor.data_mut()[0] = 0.25;
            }
        }
        let ck = Checkpoint::capture(&model, &cfg, TuningMode::Lora).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let restored = back.restore().unwrap();
        for (name, p) in model.params.iter() {
            assert!(restored.params.tensor(name).unwrap().bit_eq(&p.tensor), "{name}");
        }
    }

    #[test]
    fn frozen_checkpoint_restores_initialisation() {
        let cfg = tiny();
        let model = prepare_model(&cfg, TuningMode::Frozen).unwrap();
        let ck = Checkpoint::capture(&model, &cfg, TuningMode::Frozen).unwrap();
        assert!(ck.tensors.is_empty());
        assert!(matches!(ck.merged(), Err(Error::State(_))));
        let fresh = MultimodalModel::new(&cfg.model).unwrap();
        let restored = ck.restore().unwrap();
        for (name, p) in fresh.params.iter() {
            assert!(restored.params.tensor(name).unwrap().bit_eq(&p.tensor));
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let cfg = tiny();
        let model = prepare_model(&cfg, TuningMode::Partial).unwrap();
        let bytes = Checkpoint::capture(&model, &cfg, TuningMode::Partial)
            .unwrap()
            .to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
