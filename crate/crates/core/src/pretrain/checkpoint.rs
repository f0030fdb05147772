//! Checkpoint files: a text manifest followed by raw little-endian `f32`
//! blobs.
//!
//! ```text
//! seedenc-checkpoint 1 <manifest bytes>\n
//! <TOML manifest>
//! <blobs>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use seedenc_tensor::Tensor;

use super::optim::AdamState;
use crate::model::{parameter_layout, ModelConfig, ParamStore, DECODER_PREFIX};
use crate::{Error, Result};

const MAGIC: &str = "seedenc-checkpoint";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// RNG position: the next step's randomness is derived from `(seed, next_step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    /// Free-form run metadata (config snapshot, loss summaries).
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub optim: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    optim_step: Option<u64>,
    rng: RngState,
    model: ModelConfig,
    meta: BTreeMap<String, String>,
    tensor: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Encoder-only copy without optimizer state; all that downstream use
    /// needs.
    pub fn encoder_only(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.encoder_only(),
            optim: None,
            ..self.clone()
        }
    }

    pub fn has_decoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with(DECODER_PREFIX))
    }

    /// Checks that every tensor the model needs is present with the right
    /// shape. Decoder tensors are required only when `with_decoder`.
    pub fn validate(&self, with_decoder: bool) -> Result<()> {
        let layout: Vec<_> = parameter_layout(&self.model)
            .into_iter()
            .filter(|(n, _)| with_decoder || !n.starts_with(DECODER_PREFIX))
            .collect();
        let missing = self.params.missing(&layout);
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for (name, shape) in &layout {
            let got = self.params.get(name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {got:?}, expected {shape:?}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blobs: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f32], entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: blobs.len() as u64,
            });
            for v in data {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t.shape(), t.data(), &mut entries);
        }
        if let Some(opt) = &self.optim {
            for (name, t) in self.params.iter() {
                for (prefix, map) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                    if let Some(buf) = map.get(name) {
                        push(format!("{prefix}{name}"), t.shape(), buf, &mut entries);
                    }
                }
            }
        }
        let manifest = Manifest {
            step: self.step,
            optim_step: self.optim.as_ref().map(|o| o.step),
            rng: self.rng,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensor: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = format!("{MAGIC} {VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bad version field".into()))?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bad manifest length".into()))?;
        let start = nl + 1;
        let blob_start = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let text = std::str::from_utf8(&bytes[start..blob_start]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        manifest.model.validate()?;
        let blobs = &bytes[blob_start..];

        let mut params = ParamStore::default();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut expected_offset = 0u64;
        for entry in &manifest.tensor {
            if entry.offset != expected_offset {
                return Err(Error::Format(format!("tensor {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
            }
            let numel: usize = entry.shape.iter().product();
            let begin = entry.offset as usize;
            let end = begin + numel * 4;
            if end > blobs.len() {
                return Err(Error::Format(format!("blob for {} is truncated", entry.name)));
            }
            let data: Vec<f32> = blobs[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            expected_offset = end as u64;
            if let Some(name) = entry.name.strip_prefix(ADAM_M) {
                m.insert(name.to_string(), data);
            } else if let Some(name) = entry.name.strip_prefix(ADAM_V) {
                v.insert(name.to_string(), data);
            } else {
                params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            }
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let optim = manifest.optim_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint {
            step: manifest.step,
            rng: manifest.rng,
            model: manifest.model,
            meta: manifest.meta,
            params,
            optim,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
