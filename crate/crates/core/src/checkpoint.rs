//! Checkpoint store: a directory holding `manifest.json` plus one raw
//! little-endian f32 blob per named tensor under `tensors/`. Loading then
//! saving reproduces the directory byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ArchConfig;
use crate::nn::Module;
use crate::tape::Tensor;

pub const CHECKPOINT_FORMAT: &str = "viewshift-checkpoint-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Unconditional,
    Conditional,
    TranslationBundle,
}

/// Which tensors were copied versus freshly initialized when a model was
/// derived from another checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransplantPlan {
    /// (source name, target name) pairs copied verbatim.
    pub copied: Vec<(String, String)>,
    /// Target names initialized from scratch.
    pub fresh: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: CheckpointKind,
    pub arch: ArchConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transplant: Option<TransplantPlan>,
    /// Module prefixes flagged frozen (translation bundles).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen: Option<Vec<String>>,
    /// Extra architecture details (e.g. the adaptor layout), kept as JSON so
    /// the manifest stays self-describing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        arch: ArchConfig,
        step: u64,
        seed: u64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Self {
        let entries = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.to_string(),
                kind,
                arch,
                step,
                seed,
                tensors: entries,
                transplant: None,
                frozen: None,
                extra: None,
            },
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("tensors"))?;
        for entry in &self.manifest.tensors {
            let t = self.tensors.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("manifest lists {} but tensor missing", entry.name))
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            std::fs::write(dir.join("tensors").join(format!("{}.f32le", entry.name)), bytes)?;
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let path = dir.join("tensors").join(format!("{}.f32le", entry.name));
            let bytes = std::fs::read(&path)
                .map_err(|e| Error::Checkpoint(format!("missing blob for {}: {e}", entry.name)))?;
            let expected = entry.shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "blob for {} has {} bytes, expected {expected}",
                    entry.name,
                    bytes.len()
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(entry.name.clone(), t);
        }
        Ok(Self { manifest, tensors })
    }
}

/// Collect a module's tensors (params and buffers) under a prefix.
pub fn collect_tensors(out: &mut BTreeMap<String, Tensor>, m: &dyn Module, prefix: &str) {
    for (name, t) in crate::nn::named_tensors(m, prefix) {
        out.insert(name, t);
    }
}

/// Assign tensors into a module, consuming entries from `map`. Every
/// parameter and buffer must be present with the right shape.
pub fn assign_tensors(
    m: &mut dyn Module,
    prefix: &str,
    map: &BTreeMap<String, Tensor>,
    consumed: &mut std::collections::BTreeSet<String>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut assign = |name: &str, value: &mut Tensor| {
        match map.get(name) {
            Some(t) if t.shape() == value.shape() => {
                *value = t.clone();
                consumed.insert(name.to_string());
            }
            Some(t) => mismatched.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                value.shape()
            )),
            None => missing.push(name.to_string()),
        }
    };
    m.visit_params_mut(prefix, &mut |name, p| assign(name, &mut p.value));
    m.visit_buffers_mut(prefix, &mut |name, t| assign(name, t));
    if !missing.is_empty() || !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "cannot load module '{prefix}': missing {missing:?}, mismatched {mismatched:?}"
        )));
    }
    Ok(())
}
