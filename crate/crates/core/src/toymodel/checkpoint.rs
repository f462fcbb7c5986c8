//! `manifest.json` + `weights.bin` (little-endian f64, row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BaseParams, Model, ModelConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_json_pretty};
use crate::losses::LoraAdapter;
use crate::numerics::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "s2r2-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub nbytes: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endian: String,
    pub step: u64,
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn adapter_names(ad: &LoraAdapter) -> (String, String) {
    let p = format!("lora.{}.{}", ad.site.layer, ad.site.proj);
    (format!("{p}.a"), format!("{p}.b"))
}

fn all_tensors(model: &Model) -> Vec<(String, &Matrix, bool)> {
    let mut v: Vec<(String, &Matrix, bool)> = model.base.named().into_iter().map(|(n, m)| (n, m, false)).collect();
    for ad in &model.adapters {
        let (na, nb) = adapter_names(ad);
        v.push((na, &ad.a, true));
        v.push((nb, &ad.b, true));
    }
    v
}

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_at(model, dir, 0)
}

pub fn save_checkpoint_at(model: &Model, dir: impl AsRef<Path>, step: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, m, trainable) in all_tensors(model) {
        let offset = blob.len();
        for x in m.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: [m.rows(), m.cols()], offset, nbytes: blob.len() - offset, trainable });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f64".into(),
        endian: "little".into(),
        step,
        config: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    atomic_write(dir.join(WEIGHTS_FILE), &blob)?;
    write_json_pretty(dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    Ok(load_checkpoint_with_step(dir)?.0)
}

pub fn load_checkpoint_with_step(dir: impl AsRef<Path>) -> Result<(Model, u64)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT || manifest.dtype != "f64" || manifest.endian != "little" {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} ({}, {})",
            manifest.format, manifest.dtype, manifest.endian
        )));
    }
    let mut model = super::init_model_with_tokenizer(manifest.config.clone(), manifest.tokenizer.clone())?;
    model.base = BaseParams::zeros(&model.config);

    // shapes first, so a wrong manifest is reported as such
    let expected: Vec<(String, [usize; 2])> =
        all_tensors(&model).into_iter().map(|(n, m, _)| (n, [m.rows(), m.cols()])).collect();
    let mut entries = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::shape(format!("checkpoint lacks tensor {name}")))?;
        if entry.shape != *shape {
            return Err(Error::shape(format!("tensor {name}: manifest {:?}, config implies {:?}", entry.shape, shape)));
        }
        if entry.nbytes != shape[0] * shape[1] * 8 {
            return Err(Error::shape(format!("tensor {name}: {} bytes for shape {:?}", entry.nbytes, shape)));
        }
        entries.push(entry.clone());
    }
    if manifest.tensors.len() != expected.len() {
        return Err(Error::shape(format!("{} tensors in manifest, expected {}", manifest.tensors.len(), expected.len())));
    }

    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let total: usize = entries.iter().map(|e| e.nbytes).sum();
    if blob.len() != total {
        return Err(Error::Checksum(format!("weights.bin has {} bytes, manifest describes {total}", blob.len())));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Checksum("weights.bin sha256 mismatch".into()));
    }
    let decode = |e: &TensorEntry| -> Result<Vec<f64>> {
        let bytes = blob
            .get(e.offset..e.offset + e.nbytes)
            .ok_or_else(|| Error::Checksum(format!("tensor {} extends past blob", e.name)))?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    };

    let mut it = entries.iter();
    for (_, m) in model.base.named_mut() {
        let e = it.next().expect("entry per tensor");
        m.data_mut().copy_from_slice(&decode(e)?);
    }
    for ad in &mut model.adapters {
        let ea = it.next().expect("entry per tensor");
        ad.a.data_mut().copy_from_slice(&decode(ea)?);
        let eb = it.next().expect("entry per tensor");
        ad.b.data_mut().copy_from_slice(&decode(eb)?);
    }
    Ok((model, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::init_model;

    fn model() -> Model {
        let mut m = init_model(ModelConfig { d_model: 8, n_heads: 2, n_layers: 1, d_ff: 8, max_seq: 16, ..Default::default() }).unwrap();
        for (i, ad) in m.adapters.iter_mut().enumerate() {
            ad.b.data_mut().iter_mut().for_each(|x| *x = 0.01 * i as f64 - 0.3);
        }
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint_at(&m, dir.path(), 17).unwrap();
        let (back, step) = load_checkpoint_with_step(dir.path()).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, m);
        let toks = m.encode("abc");
        assert_eq!(back.logits(&toks).unwrap(), m.logits(&toks).unwrap());
        let man = read_manifest(dir.path()).unwrap();
        assert!(man.tensors.iter().filter(|t| t.trainable).all(|t| t.name.starts_with("lora.")));
    }

    #[test]
    fn truncated_blob_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checksum(_))));
        let mut flipped = bytes.clone();
        flipped[3] ^= 1;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checksum(_))));
    }

    #[test]
    fn wrong_shape_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut man: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        man["tensors"][0]["shape"] = serde_json::json!([3, 3]);
        fs::write(&p, serde_json::to_string(&man).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn garbage_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ nope").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Parse { .. })));
    }
}
