//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SMNT" | version u32 | meta length u32 | meta (UTF-8 JSON)
//! | concatenated parameter data, f32 little-endian
//! ```
//!
//! The metadata carries the model config, the parameter table (name,
//! shape, element offset into the data section, in registration order),
//! the normalization constants of the training data and the training
//! seed. Loading rebuilds the model from the config and overwrites its
//! registry in table order, so saving again reproduces the file byte for
//! byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smnet::config::ModelConfig;
use crate::smnet::model::Model;

pub const MAGIC: [u8; 4] = *b"SMNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    norm_min: f64,
    norm_max: f64,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// A loaded model together with the training-time constants needed to
/// map raw fields into and out of the unit interval.
pub struct Checkpoint {
    pub model: Model,
    pub norm_min: f64,
    pub norm_max: f64,
    pub seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    norm_min: f64,
    norm_max: f64,
    seed: u64,
) -> Result<()> {
    let params = model.parameters();
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, p) in &params {
        let s = p.shape();
        entries.push(ParamEntry {
            name: name.clone(),
            shape: [s.n, s.c, s.h, s.w],
            offset,
        });
        offset += p.numel() as u64;
    }
    let meta = Meta {
        config: model.config.clone(),
        norm_min,
        norm_max,
        seed,
        params: entries,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut bytes =
        Vec::with_capacity(12 + meta_json.len() + offset as usize * 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    for (_, p) in &params {
        for v in p.data().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {off}: needed {n} more bytes, file ends at {}",
                bytes.len()
            )));
        }
        Ok(())
    };
    need(0, 12)?;
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(
            "not a checkpoint: bad magic at byte 0 (expected \"SMNT\")".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12, meta_len)?;
    let meta: Meta = serde_json::from_slice(&bytes[12..12 + meta_len]).map_err(|e| {
        Error::Format(format!("checkpoint metadata at byte 12 is not valid: {e}"))
    })?;

    let model = Model::new(&meta.config)?;
    let registry = model.parameters();
    if registry.len() != meta.params.len() {
        return Err(Error::Format(format!(
            "parameter table has {} entries but the config builds {} parameters",
            meta.params.len(),
            registry.len()
        )));
    }
    let data_start = 12 + meta_len;
    let mut expected_offset = 0u64;
    for (entry, (name, p)) in meta.params.iter().zip(&registry) {
        if entry.name != *name {
            return Err(Error::Format(format!(
                "parameter table mismatch: entry '{}' where the model registers '{name}'",
                entry.name
            )));
        }
        let s = p.shape();
        if entry.shape != [s.n, s.c, s.h, s.w] {
            return Err(Error::Format(format!(
                "parameter '{name}' has shape {:?} in the file but {s} in the model",
                entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "parameter '{name}' starts at element {} but the table is contiguous up to {}",
                entry.offset, expected_offset
            )));
        }
        let byte_off = data_start + entry.offset as usize * 4;
        let n = p.numel();
        need(byte_off, n * 4)?;
        let values: Vec<f32> = bytes[byte_off..byte_off + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.set_data(&values)?;
        expected_offset += n as u64;
    }
    let data_end = data_start + expected_offset as usize * 4;
    if bytes.len() != data_end {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes after the parameter data at byte {data_end}",
            bytes.len() - data_end
        )));
    }

    let mut model = model;
    if let Some(p) = model.perceptual.as_mut() {
        // A saved model has finished pretraining; its feature spaces
        // stay fixed from here on.
        p.freeze();
    }
    Ok(Checkpoint {
        model,
        norm_min: meta.norm_min,
        norm_max: meta.norm_max,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::{NoGradGuard, Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            bottleneck_blocks: 1,
            scale: 2,
            seed: 21,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.smnt");
        let second = dir.path().join("b.smnt");
        let model = Model::new(&tiny()).unwrap();
        save_checkpoint(&first, &model, 0.25, 1.75, 42).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        assert_eq!(loaded.norm_min, 0.25);
        assert_eq!(loaded.norm_max, 1.75);
        assert_eq!(loaded.seed, 42);
        save_checkpoint(&second, &loaded.model, loaded.norm_min, loaded.norm_max, loaded.seed)
            .unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn loaded_model_reproduces_the_forward_pass_bitwise() {
        let _quiet = NoGradGuard::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.smnt");
        let model = Model::new(&tiny()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(
            Shape::new(1, 1, 8, 8),
            (0..64).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let before = model.forward(&x).unwrap();
        save_checkpoint(&path, &model, 0.0, 1.0, 7).unwrap();
        let after = load_checkpoint(&path).unwrap().model.forward(&x).unwrap();
        for (a, b) in before.data().iter().zip(after.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corruption_is_reported_with_byte_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.smnt");
        let model = Model::new(&tiny()).unwrap();
        save_checkpoint(&path, &model, 0.0, 1.0, 7).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("byte 0"), "{err}");

        fs::write(&path, &good[..good.len() - 6]).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        fs::write(&path, &trailing).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("trailing"), "{err}");

        // Rename one entry in the JSON table (same length, so the
        // header stays consistent) and the name check must fire.
        let mut renamed = good.clone();
        let needle = b"\"stem.w\"";
        let pos = renamed
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        renamed[pos + 6] = b'x';
        fs::write(&path, &renamed).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("stem.x") || err.contains("mismatch"), "{err}");
    }

    #[test]
    fn unsupported_versions_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.smnt");
        let model = Model::new(&tiny()).unwrap();
        save_checkpoint(&path, &model, 0.0, 1.0, 7).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
