//! Checkpoint directory: `manifest.json` describing layers and tensors, and
//! `weights.bin` holding an 8-byte magic followed by little-endian f64
//! values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Buffer, LayerSpec, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: [u8; 8] = *b"HSPCWTS1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into `weights.bin`.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    variant_tag: String,
    input_size: usize,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = WEIGHTS_MAGIC.to_vec();
    let mut tensors = Vec::with_capacity(model.params.len() + model.buffers.len());
    let entries = model
        .params
        .iter()
        .map(|p| (&p.name, Role::Param, &p.tensor, p.trainable))
        .chain(model.buffers.iter().map(|b| (&b.name, Role::Buffer, &b.tensor, false)));
    for (name, role, tensor, trainable) in entries {
        tensors.push(TensorEntry {
            name: name.clone(),
            role,
            shape: tensor.shape().to_vec(),
            trainable,
            offset: blob.len(),
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        variant_tag: model.variant_tag.clone(),
        input_size: model.input_size,
        layers: model.layers.clone(),
        tensors,
    };
    let mpath = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join("weights.bin");
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let wpath = dir.join("weights.bin");
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if blob.len() < WEIGHTS_MAGIC.len() || blob[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic bytes", wpath.display())));
    }

    // Rebuild the expected layout from the layer list and check the manifest
    // agrees with it entry by entry.
    let template = ModelBundle::from_layers(manifest.variant_tag.clone(), manifest.input_size, manifest.layers.clone(), 0)?;
    let expected: Vec<(&str, &[usize], bool)> = template
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.tensor.shape(), true))
        .chain(template.buffers.iter().map(|b| (b.name.as_str(), b.tensor.shape(), false)))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, layers imply {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut cursor = WEIGHTS_MAGIC.len();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (entry, (name, shape, is_param)) in manifest.tensors.iter().zip(expected) {
        let role_ok = matches!((&entry.role, is_param), (Role::Param, true) | (Role::Buffer, false));
        if entry.name != name || entry.shape != shape || !role_ok {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} disagrees with layer layout (`{name}` {shape:?})",
                entry.name, entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(Error::Checkpoint(format!("tensor `{}` has offset {} (expected {cursor})", entry.name, entry.offset)));
        }
        let n: usize = shape.iter().product();
        let end = cursor + 8 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("{}: truncated at tensor `{}`", wpath.display(), entry.name)));
        }
        let data: Vec<f64> = blob[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cursor = end;
        let tensor = Tensor::new(shape, data)?;
        if is_param {
            params.push(Parameter { name: entry.name.clone(), tensor, trainable: entry.trainable });
        } else {
            buffers.push(Buffer { name: entry.name.clone(), tensor });
        }
    }
    if cursor != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            wpath.display(),
            blob.len() - cursor
        )));
    }
    Ok(ModelBundle {
        variant_tag: manifest.variant_tag,
        input_size: manifest.input_size,
        layers: manifest.layers,
        params,
        buffers,
    })
}
