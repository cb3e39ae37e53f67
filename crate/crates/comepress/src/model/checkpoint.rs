//! Checkpoint directory format.
//!
//! A checkpoint is a directory with three files:
//!
//! * `config` — JSON with every `ModelConfig` field;
//! * `manifest` — JSON array of `{name, dtype, shape, offset, length}`
//!   entries (offsets and lengths in bytes);
//! * `weights.bin` — little-endian f32 values, row-major, concatenated in
//!   manifest order.
//!
//! Tensor names are `embed`, `layers.<i>.<attn_norm_gamma|q|k|v|o|
//! ffn_norm_gamma|gate|up|down>`, `final_norm_gamma`, `unembed`, emitted in
//! that order. Save -> load -> save is byte-identical.
//!
//! The parsing stages (`parse_model_config`, `parse_manifest`,
//! `assemble_model`) are pure byte-level functions so untrusted inputs can be
//! validated (and fuzzed) without touching the filesystem.

use super::{DecoderLayerWeights, ModelConfig, ToyModel, LAYER_TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// Expected (name, shape) list in manifest order.
pub fn expected_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, d])];
    for i in 0..cfg.n_layers {
        for name in LAYER_TENSOR_NAMES {
            let shape = match name {
                "attn_norm_gamma" | "ffn_norm_gamma" => vec![d],
                "q" | "k" | "v" | "o" => vec![d, d],
                "gate" | "up" => vec![cfg.d_ff, d],
                "down" => vec![d, cfg.d_ff],
                _ => unreachable!(),
            };
            out.push((format!("layers.{i}.{name}"), shape));
        }
    }
    out.push(("final_norm_gamma".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![cfg.vocab_size, d]));
    out
}

pub fn parse_model_config(bytes: &[u8]) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_slice(bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    let entries: Vec<TensorEntry> = serde_json::from_slice(bytes)?;
    Ok(entries)
}

fn tensor_for<'a>(model: &'a ToyModel<f32>, name: &str) -> Option<&'a Tensor<f32>> {
    match name {
        "embed" => Some(&model.embed),
        "final_norm_gamma" => Some(&model.final_norm_gamma),
        "unembed" => Some(&model.unembed),
        _ => {
            let rest = name.strip_prefix("layers.")?;
            let (idx, field) = rest.split_once('.')?;
            let layer = model.layers.get(idx.parse::<usize>().ok()?)?;
            Some(match field {
                "attn_norm_gamma" => &layer.attn_norm_gamma,
                "q" => &layer.q,
                "k" => &layer.k,
                "v" => &layer.v,
                "o" => &layer.o,
                "ffn_norm_gamma" => &layer.ffn_norm_gamma,
                "gate" => &layer.gate,
                "up" => &layer.up,
                "down" => &layer.down,
                _ => return None,
            })
        }
    }
}

/// Validate a manifest against the config and decode the weight blob.
pub fn assemble_model(
    cfg: &ModelConfig,
    entries: &[TensorEntry],
    blob: &[u8],
) -> Result<ToyModel<f32>> {
    cfg.validate()?;
    let expected = expected_tensors(cfg);
    if entries.len() != expected.len() {
        return Err(Error::Corruption(format!(
            "manifest has {} tensors, config wants {}",
            entries.len(),
            expected.len()
        )));
    }
    let mut model = ToyModel {
        config: cfg.clone(),
        embed: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
        layers: (0..cfg.n_layers).map(|_| DecoderLayerWeights::zeros(cfg)).collect(),
        final_norm_gamma: Tensor::zeros(&[cfg.d_model]),
        unembed: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
    };
    for (entry, (name, shape)) in entries.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Corruption(format!(
                "manifest tensor '{}' where '{}' expected",
                entry.name, name
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Corruption(format!(
                "tensor '{}' has dtype '{}', only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Corruption(format!(
                "tensor '{}' has shape {:?}, config wants {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let numel: usize = shape.iter().product();
        let want_len = numel.checked_mul(4).ok_or_else(|| {
            Error::Corruption(format!("tensor '{}' size overflows", entry.name))
        })?;
        if entry.length != want_len {
            return Err(Error::Corruption(format!(
                "tensor '{}' length {} != shape size {}",
                entry.name, entry.length, want_len
            )));
        }
        let end = entry.offset.checked_add(entry.length).ok_or_else(|| {
            Error::Corruption(format!("tensor '{}' offset overflows", entry.name))
        })?;
        if end > blob.len() {
            return Err(Error::Corruption(format!(
                "tensor '{}' spans [{}, {end}) beyond blob of {} bytes",
                entry.name, entry.offset, blob.len()
            )));
        }
        let raw = &blob[entry.offset..end];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let dst = match entry.name.as_str() {
            "embed" => &mut model.embed,
            "final_norm_gamma" => &mut model.final_norm_gamma,
            "unembed" => &mut model.unembed,
            n => {
                let rest = n.strip_prefix("layers.").expect("name validated");
                let (idx, field) = rest.split_once('.').expect("name validated");
                let layer = &mut model.layers[idx.parse::<usize>().expect("name validated")];
                match field {
                    "attn_norm_gamma" => &mut layer.attn_norm_gamma,
                    "q" => &mut layer.q,
                    "k" => &mut layer.k,
                    "v" => &mut layer.v,
                    "o" => &mut layer.o,
                    "ffn_norm_gamma" => &mut layer.ffn_norm_gamma,
                    "gate" => &mut layer.gate,
                    "up" => &mut layer.up,
                    "down" => &mut layer.down,
                    _ => unreachable!("name validated"),
                }
            }
        };
        *dst = Tensor::from_vec(shape.clone(), data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyModel<f32>, dir: &Path) -> Result<()> {
    if model.layers.len() != model.config.n_layers {
        return Err(Error::Contract(format!(
            "model has {} layers but config says {}",
            model.layers.len(),
            model.config.n_layers
        )));
    }
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(&model.config)? + "\n";
    std::fs::write(dir.join("config"), config_json)?;

    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape) in expected_tensors(&model.config) {
        let tensor = tensor_for(model, &name).expect("expected_tensors matches model layout");
        debug_assert_eq!(tensor.shape(), &shape[..]);
        let offset = blob.len();
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            dtype: "f32".to_string(),
            shape,
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest_json = serde_json::to_string_pretty(&entries)? + "\n";
    std::fs::write(dir.join("manifest"), manifest_json)?;
    std::fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ToyModel<f32>> {
    let cfg = parse_model_config(&std::fs::read(dir.join("config"))?)?;
    let entries = parse_manifest(&std::fs::read(dir.join("manifest"))?)?;
    let blob = std::fs::read(dir.join("weights.bin"))?;
    assemble_model(&cfg, &entries, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn small_model() -> ToyModel<f32> {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers: 1,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(21);
        ToyModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&model, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        for f in ["config", "manifest", "weights.bin"] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        save_checkpoint(&model, &a).unwrap();
        let blob = std::fs::read(a.join("weights.bin")).unwrap();
        std::fs::write(a.join("weights.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Corruption(_))));
    }

    #[test]
    fn manifest_shape_mismatch_is_corruption() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        save_checkpoint(&model, &a).unwrap();
        let mut entries = parse_manifest(&std::fs::read(a.join("manifest")).unwrap()).unwrap();
        entries[0].shape = vec![1, 1];
        std::fs::write(a.join("manifest"), serde_json::to_string(&entries).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Corruption(_))));
    }

    #[test]
    fn one_layer_offsets_match_documented_layout() {
        // Offsets derive from the fixed manifest order: embed, the nine layer
        // tensors, final_norm_gamma, unembed, each f32 row-major.
        let model = small_model();
        let cfg = &model.config;
        let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let sizes: Vec<(&str, usize)> = vec![
            ("embed", v * d),
            ("layers.0.attn_norm_gamma", d),
            ("layers.0.q", d * d),
            ("layers.0.k", d * d),
            ("layers.0.v", d * d),
            ("layers.0.o", d * d),
            ("layers.0.ffn_norm_gamma", d),
            ("layers.0.gate", ff * d),
            ("layers.0.up", ff * d),
            ("layers.0.down", d * ff),
            ("final_norm_gamma", d),
            ("unembed", v * d),
        ];
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        save_checkpoint(&model, &a).unwrap();
        let entries = parse_manifest(&std::fs::read(a.join("manifest")).unwrap()).unwrap();
        let mut offset = 0usize;
        for ((name, numel), entry) in sizes.iter().zip(&entries) {
            assert_eq!(&entry.name, name);
            assert_eq!(entry.offset, offset, "offset of {name}");
            assert_eq!(entry.length, numel * 4, "length of {name}");
            offset += numel * 4;
        }
        let blob = std::fs::read(a.join("weights.bin")).unwrap();
        assert_eq!(blob.len(), offset);
    }
}
