//! Model persistence: a JSON manifest plus little-endian `f32` blobs.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/embeddings.f32   (VASG only; users then products, row-major)
//! <dir>/decoder.f32      (VASG) or encoder.f32 (encoder)
//! ```
//!
//! Network blobs hold, layer by layer, the `out × in` weight matrix in
//! row-major order followed by the bias. Parameters are `f64` in memory and
//! rounded to `f32` on save.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::IdIndex;
use crate::mapper::{Encoder, MapperConfig};
use crate::nn::{Dense, Mlp};
use crate::vasg::{EmbeddingTable, TrainConfig, UncertaintyWeights, VasgModel};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    /// Number of `f32` values.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub role: String,
    pub dim: usize,
    pub feature_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub dropout_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub users: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub products: Vec<String>,
    pub config: serde_json::Value,
    pub blobs: Vec<BlobEntry>,
}

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

/// Serialized network parameters, exactly as written to disk.
pub fn mlp_bytes(m: &Mlp) -> Vec<u8> {
    f32_bytes(&m.flatten())
}

/// Hex SHA-256 of [`mlp_bytes`].
pub fn mlp_checksum(m: &Mlp) -> String {
    let digest = Sha256::digest(mlp_bytes(m));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn mlp_from_flat(sizes: &[usize], dropout_p: f64, flat: &[f64]) -> Result<Mlp> {
    if sizes.len() < 2 {
        return Err(Error::Dimension(format!("layer sizes {sizes:?}")));
    }
    let mut at = 0;
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let n_w = fan_in * fan_out;
        if at + n_w + fan_out > flat.len() {
            return Err(Error::Dimension("network blob too short".into()));
        }
        let weights = Array2::from_shape_vec((fan_out, fan_in), flat[at..at + n_w].to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        at += n_w;
        let bias = Array1::from(flat[at..at + fan_out].to_vec());
        at += fan_out;
        layers.push(Dense { weights, bias });
    }
    if at != flat.len() {
        return Err(Error::Dimension(format!(
            "network blob has {} values, layer sizes imply {at}",
            flat.len()
        )));
    }
    Mlp::from_layers(layers, dropout_p)
}

fn write_blob(dir: &Path, file: &str, values: &[f64]) -> Result<BlobEntry> {
    let path = dir.join(file);
    fs::write(&path, f32_bytes(values)).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry {
        name: file.trim_end_matches(".f32").to_string(),
        file: file.to_string(),
        count: values.len(),
    })
}

fn read_blob(dir: &Path, manifest: &ModelManifest, name: &str) -> Result<Vec<f64>> {
    let entry = manifest
        .blobs
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::Config(format!("manifest lists no `{name}` blob")))?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != entry.count * 4 {
        return Err(Error::Dimension(format!(
            "{}: {} bytes, manifest declares {} values",
            path.display(),
            bytes.len(),
            entry.count
        )));
    }
    Ok(read_f32(&bytes))
}

fn write_manifest(dir: &Path, manifest: &ModelManifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path, role: &str) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    if manifest.role != role {
        return Err(Error::Config(format!(
            "{} holds a `{}` model, expected `{role}`",
            dir.display(),
            manifest.role
        )));
    }
    Ok(manifest)
}

pub fn save_model(model: &VasgModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blobs = vec![
        write_blob(dir, "embeddings.f32", model.embeddings.data())?,
        write_blob(dir, "decoder.f32", &model.decoder.flatten())?,
    ];
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        role: "vasg".into(),
        dim: model.dim(),
        feature_dim: model.feature_dim(),
        layer_sizes: model.decoder.sizes(),
        dropout_p: model.decoder.dropout_p,
        s1: Some(model.weights.s1),
        s2: Some(model.weights.s2),
        users: model.embeddings.users().ids().to_vec(),
        products: model.embeddings.products().ids().to_vec(),
        config: serde_json::to_value(&model.config).map_err(|e| Error::json("config", e))?,
        blobs,
    };
    write_manifest(dir, &manifest)
}

pub fn load_model(dir: &Path) -> Result<VasgModel> {
    let m = read_manifest(dir, "vasg")?;
    let config: TrainConfig =
        serde_json::from_value(m.config.clone()).map_err(|e| Error::json("train config", e))?;
    let users = IdIndex::from_ids(m.users.iter().cloned());
    let products = IdIndex::from_ids(m.products.iter().cloned());
    if users.ids() != m.users.as_slice() || products.ids() != m.products.as_slice() {
        return Err(Error::Config("manifest ids must be unique and sorted".into()));
    }
    let embeddings = EmbeddingTable::from_parts(users, products, m.dim, read_blob(dir, &m, "embeddings")?)?;
    let decoder = mlp_from_flat(&m.layer_sizes, m.dropout_p, &read_blob(dir, &m, "decoder")?)?;
    let model = VasgModel {
        embeddings,
        decoder,
        weights: UncertaintyWeights {
            s1: m.s1.unwrap_or(0.0),
            s2: m.s2.unwrap_or(0.0),
        },
        config,
    };
    model.check()?;
    if model.feature_dim() != m.feature_dim {
        return Err(Error::Dimension("decoder output differs from feature_dim".into()));
    }
    Ok(model)
}

pub fn save_encoder(encoder: &Encoder, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blobs = vec![write_blob(dir, "encoder.f32", &encoder.mlp.flatten())?];
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        role: "encoder".into(),
        dim: encoder.mlp.output_dim(),
        feature_dim: encoder.mlp.input_dim(),
        layer_sizes: encoder.mlp.sizes(),
        dropout_p: encoder.mlp.dropout_p,
        s1: None,
        s2: None,
        users: Vec::new(),
        products: Vec::new(),
        config: serde_json::to_value(&encoder.config).map_err(|e| Error::json("config", e))?,
        blobs,
    };
    write_manifest(dir, &manifest)
}

pub fn load_encoder(dir: &Path) -> Result<Encoder> {
    let m = read_manifest(dir, "encoder")?;
    let config: MapperConfig =
        serde_json::from_value(m.config.clone()).map_err(|e| Error::json("mapper config", e))?;
    let mlp = mlp_from_flat(&m.layer_sizes, m.dropout_p, &read_blob(dir, &m, "encoder")?)?;
    Ok(Encoder { mlp, config })
}
