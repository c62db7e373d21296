//! Versioned on-disk model state.
//!
//! Layout (little-endian): magic `QVIT`, `u32` format version, `u64`
//! manifest length, UTF-8 JSON manifest, then raw tensor blobs back to back.
//! The manifest records every tensor's shape, byte extent and SHA-256
//! checksum, so truncation and corruption surface as integrity errors
//! instead of silently wrong weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QVit};
use crate::quant::{QuantizerConfig, QuantizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QVIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
    checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SiteRecord {
    name: String,
    cfg: QuantizerConfig,
    state: QuantizerState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    step: u64,
    quantizers: Vec<SiteRecord>,
    tensors: Vec<TensorRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serialize model parameters, quantizer states and the training step.
pub fn save(model: &QVit, step: u64, path: &Path) -> Result<()> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for p in &model.params {
        let bytes = tensor_bytes(&p.value);
        tensors.push(TensorRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".to_string(),
            offset: blobs.len() as u64,
            byte_len: bytes.len() as u64,
            checksum: sha256_hex(&bytes),
        });
        blobs.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        step,
        quantizers: model
            .sites
            .iter()
            .map(|s| SiteRecord {
                name: s.name.clone(),
                cfg: s.cfg,
                state: s.state,
            })
            .collect(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&blobs)?;
    Ok(())
}

/// Load a checkpoint back into a model. The model is rebuilt from the stored
/// configuration; every parameter and quantizer state is restored bit-exact.
pub fn load(path: &Path) -> Result<(QVit, u64)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "checkpoint too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("manifest extends past end of file".to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    let blobs = &bytes[manifest_end..];

    let mut model = QVit::new(manifest.model.clone(), 0)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint stores {} tensors but the configuration implies {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for record in &manifest.tensors {
        let start = record.offset as usize;
        let end = start
            .checked_add(record.byte_len as usize)
            .filter(|&e| e <= blobs.len())
            .ok_or_else(|| {
                Error::Integrity(format!("tensor {} extends past end of file", record.name))
            })?;
        let raw = &blobs[start..end];
        if sha256_hex(raw) != record.checksum {
            return Err(Error::Integrity(format!(
                "checksum mismatch for tensor {}",
                record.name
            )));
        }
        if record.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported dtype {} for tensor {}",
                record.dtype, record.name
            )));
        }
        let expected: usize = record.shape.iter().product::<usize>() * 8;
        if raw.len() != expected {
            return Err(Error::Integrity(format!(
                "tensor {} has {} bytes, shape {:?} needs {}",
                record.name,
                raw.len(),
                record.shape,
                expected
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let param = model
            .params
            .iter_mut()
            .find(|p| p.name == record.name)
            .ok_or_else(|| {
                Error::Integrity(format!("checkpoint tensor {} unknown to the model", record.name))
            })?;
        if param.value.shape() != record.shape.as_slice() {
            return Err(Error::Integrity(format!(
                "tensor {} shape {:?} does not match the model's {:?}",
                record.name,
                record.shape,
                param.value.shape()
            )));
        }
        param.value = Tensor::new(record.shape.clone(), data)?;
    }
    for record in &manifest.quantizers {
        let site = model
            .sites
            .iter_mut()
            .find(|s| s.name == record.name)
            .ok_or_else(|| {
                Error::Integrity(format!("quantizer {} unknown to the model", record.name))
            })?;
        site.cfg = record.cfg;
        site.state = record.state;
    }
    Ok((model, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{ForwardMode, ModelConfig, QuantParts};
    use crate::quant::ScaleMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
            classes: 3,
            w_bits: 4,
            a_bits: 4,
            first_last_bits: 8,
            irm_enabled: true,
            quant_parts: QuantParts::default(),
            scale_mode: ScaleMode::Learned,
        }
    }

    #[test]
    fn roundtrip_bit_identical_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qvit");
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let images = Tensor::uniform(&[2, 16, 16, 1], -1.0, 1.0, &mut rng);

        let mut model = QVit::new(cfg(), 5).unwrap();
        let mut tape = Tape::new();
        model.calibrate(&mut tape, &images).unwrap();
        save(&model, 42, &path).unwrap();

        let (mut loaded, step) = load(&path).unwrap();
        assert_eq!(step, 42);
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        for (a, b) in model.sites.iter().zip(&loaded.sites) {
            assert_eq!(a.state, b.state, "{}", a.name);
        }

        let mut t1 = Tape::new();
        let out1 = model
            .forward(&mut t1, &images, ForwardMode::Quantized, false)
            .unwrap();
        let mut t2 = Tape::new();
        let out2 = loaded
            .forward(&mut t2, &images, ForwardMode::Quantized, false)
            .unwrap();
        assert_eq!(
            t1.value(out1.logits).data(),
            t2.value(out2.logits).data()
        );
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.qvit");
        let p2 = dir.path().join("b.qvit");
        let model = QVit::new(cfg(), 5).unwrap();
        save(&model, 7, &p1).unwrap();
        save(&model, 7, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qvit");
        let model = QVit::new(cfg(), 5).unwrap();
        save(&model, 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qvit");
        let model = QVit::new(cfg(), 5).unwrap();
        save(&model, 0, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qvit");
        let model = QVit::new(cfg(), 5).unwrap();
        save(&model, 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        save(&model, 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::Version { found: 99, expected: 1 })
        ));
    }
}
