//! Model snapshots: one flat binary of little-endian f64 arrays plus a JSON
//! manifest of (name, shape, trainable flag, byte offset), along with the
//! config and structure selection needed to rebuild the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::prompts::StructureSpec;
use crate::vit::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub byte_offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub config: ModelConfig,
    pub adapt: StructureSpec,
    pub arrays: Vec<ArrayEntry>,
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn save(model: &Model, adapt: &StructureSpec, base: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    model.visit_params(|name, t, trainable| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable,
            byte_offset: bytes.len(),
        });
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = SnapshotManifest {
        config: model.config().clone(),
        adapt: adapt.clone(),
        arrays,
    };
    let bin_path = base.with_extension("bin");
    let json_path = base.with_extension("json");
    std::fs::write(&bin_path, &bytes).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(())
}

/// Rebuilds a model from `<base>.bin` + `<base>.json`, restoring every array
/// by name and validating shapes.
pub fn load(base: &Path) -> Result<(Model, StructureSpec)> {
    let json_path = base.with_extension("json");
    let bin_path = base.with_extension("bin");
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let manifest: SnapshotManifest = serde_json::from_str(&text)?;
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;

    let mut model = Model::build(manifest.config.clone(), &manifest.adapt, 0)?;
    let by_name: std::collections::HashMap<&str, &ArrayEntry> =
        manifest.arrays.iter().map(|a| (a.name.as_str(), a)).collect();

    let restore = |name: &str, t: &mut crate::tensor::Tensor| -> Result<()> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::Data(format!("snapshot missing array {name}")))?;
        if entry.shape != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "snapshot load",
                lhs: entry.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = t.numel() * 8;
        let start = entry.byte_offset;
        let slice = bytes
            .get(start..start + n)
            .ok_or_else(|| Error::Data(format!("snapshot truncated at {name}")))?;
        for (v, chunk) in t.values_mut().iter_mut().zip(slice.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    };

    let mut failure = None;
    model.backbone.visit_mut(|name, t| {
        if failure.is_none() {
            failure = restore(&name, t).err();
        }
    });
    model.bank.visit_mut(|name, t| {
        if failure.is_none() {
            failure = restore(&name, t).err();
        }
    });
    if failure.is_none() {
        failure = restore("head.weight", &mut model.head.weight).err();
    }
    if failure.is_none() {
        failure = restore("head.bias", &mut model.head.bias).err();
    }
    match failure {
        Some(e) => Err(e),
        None => Ok((model, manifest.adapt)),
    }
}
