use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NnetError;

pub const CHECKPOINT_FORMAT: &str = "twinlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON container for a trained model: a kind tag, scalar
/// metadata and named flat tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> &mut Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name} shape"
        );
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
        self
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NnetError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(NnetError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor, NnetError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NnetError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64, NnetError> {
        self.meta
            .get(key)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| NnetError::Checkpoint(format!("missing numeric field {key}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, NnetError> {
        self.meta
            .get(key)
            .and_then(serde_json::Value::as_u64)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| NnetError::Checkpoint(format!("missing integer field {key}")))
    }

    pub fn meta_usizes(&self, key: &str) -> Result<Vec<usize>, NnetError> {
        let bad = || NnetError::Checkpoint(format!("missing integer list {key}"));
        self.meta
            .get(key)
            .and_then(serde_json::Value::as_array)
            .ok_or_else(bad)?
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|v| usize::try_from(v).ok())
                    .ok_or_else(bad)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnetError> {
        let ck: Self =
            serde_json::from_str(text).map_err(|e| NnetError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnetError::Checkpoint(format!(
                "unknown format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnetError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for t in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(NnetError::Checkpoint(format!(
                    "tensor {} has inconsistent shape",
                    t.name
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| NnetError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NnetError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
