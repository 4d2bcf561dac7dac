//! Network and preference-head state as a JSON document. Each tensor is
//! stored as base64 of its little-endian `f64` bytes, so a save/load cycle
//! is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, SegNetwork};
use crate::error::{Error, Result};
use crate::feedback_adapt::{init_head, PreferenceHead};

const FORMAT: &str = "hitta-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub len: usize,
    pub data: String,
}

impl TensorBlob {
    pub fn encode(name: &str, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_string(),
            len: values.len(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::format("checkpoint", format!("{}: {e}", self.name)))?;
        if bytes.len() != self.len * 8 {
            return Err(Error::format(
                "checkpoint",
                format!("{}: {} bytes for {} values", self.name, bytes.len(), self.len),
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub feature_channels: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub tensors: Vec<TensorBlob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorBlob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadState>,
}

impl Checkpoint {
    pub fn capture(net: &mut SegNetwork, head: Option<&mut PreferenceHead>) -> Self {
        let tensors = net
            .named_tensors()
            .iter()
            .map(|(n, _, v)| TensorBlob::encode(n, v))
            .collect();
        let head = head.map(|h| HeadState {
            feature_channels: h.feature_channels(),
            num_classes: h.num_classes(),
            hidden: h.conv1.out_channels,
            tensors: h
                .params_mut()
                .into_iter()
                .map(|p| TensorBlob::encode(&p.name, p.value))
                .collect(),
        });
        Self {
            format: FORMAT.into(),
            version: VERSION,
            arch: *net.arch(),
            tensors,
            head,
        }
    }

    /// Rebuilds the network (evaluation mode) and head. Every tensor of the
    /// architecture must be present exactly once.
    pub fn restore(&self) -> Result<(SegNetwork, Option<PreferenceHead>)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported format {} v{}", self.format, self.version),
            ));
        }
        let mut net = SegNetwork::new(self.arch, 0)?;
        let expected = net.named_tensors().len();
        if self.tensors.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("expected {expected} tensors, found {}", self.tensors.len()),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::format("checkpoint", format!("duplicate tensor {}", t.name)));
            }
            net.set_tensor(&t.name, &t.decode()?)?;
        }
        for (name, st) in net.bn_layers() {
            st.validate()
                .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        }
        let head = match &self.head {
            None => None,
            Some(h) => {
                let mut head = init_head(h.feature_channels, h.num_classes, h.hidden, 0)?;
                if h.feature_channels != net.feature_channels() || h.num_classes != self.arch.num_classes {
                    return Err(Error::format("checkpoint", "head does not match the network"));
                }
                let mut params = head.params_mut();
                if params.len() != h.tensors.len() {
                    return Err(Error::format("checkpoint", "head tensor count mismatch"));
                }
                for t in &h.tensors {
                    let values = t.decode()?;
                    let p = params
                        .iter_mut()
                        .find(|p| p.name == t.name)
                        .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {}", t.name)))?;
                    if p.value.len() != values.len() {
                        return Err(Error::Shape(format!("{}: length mismatch", t.name)));
                    }
                    p.value.copy_from_slice(&values);
                }
                drop(params);
                Some(head)
            }
        };
        Ok((net, head))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::format("checkpoint", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_network(net: &mut SegNetwork, path: &Path) -> Result<()> {
    Checkpoint::capture(net, None).save(path)
}

pub fn load_network(path: &Path) -> Result<SegNetwork> {
    Checkpoint::load(path)?.restore().map(|(n, _)| n)
}
