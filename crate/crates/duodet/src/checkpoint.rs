//! Versioned checkpoint container: a JSON manifest (shapes, keys, config,
//! stage, step) followed by raw little-endian f64 tensor payloads, in one
//! file. Save -> load -> save round-trips to identical bytes.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DUODETCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub key: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// 1 after the first training stage, 2 after ensemble training.
    pub stage: u32,
    pub step: u64,
    pub config: Config,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

/// Write a checkpoint file.
pub fn save(
    path: &Path,
    stage: u32,
    step: u64,
    config: &Config,
    params: &ParamStore,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (key, value) in params.iter() {
        let offset = payload.len() as u64;
        for v in value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorMeta {
            key: key.clone(),
            rows: value.nrows(),
            cols: value.ncols(),
            dtype: "f64".into(),
            offset,
            len_bytes: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        stage,
        step,
        config: config.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes())
        .map_err(io)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    f.write_all(&manifest_bytes).map_err(io)?;
    f.write_all(&payload).map_err(io)?;
    f.flush().map_err(io)?;
    Ok(())
}

/// Read a checkpoint file, validating version, keys and payload bounds.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |msg: &str| Error::Dataset(format!("checkpoint {}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::CheckpointVersion {
            got: version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if 20 + manifest_len > bytes.len() {
        return Err(fail("manifest truncated"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[20..20 + manifest_len])?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::CheckpointVersion {
            got: manifest.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let payload = &bytes[20 + manifest_len..];
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(fail(&format!("tensor '{}' has dtype {}", t.key, t.dtype)));
        }
        let start = t.offset as usize;
        let end = start + t.len_bytes as usize;
        if end > payload.len() || t.len_bytes as usize != t.rows * t.cols * 8 {
            return Err(Error::CheckpointTruncated { key: t.key.clone() });
        }
        let data = &payload[start..end];
        let mut value = Array2::<f64>::zeros((t.rows, t.cols));
        for (k, chunk) in data.chunks_exact(8).enumerate() {
            value[[k / t.cols, k % t.cols]] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        params.insert(&t.key, value);
    }
    Ok(Checkpoint {
        manifest,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::decoder::init_stage1_params;

    fn store() -> (Config, ParamStore) {
        let mut cfg = Config::desk_default();
        cfg.model.num_layers = 1;
        let mut params = ParamStore::new();
        init_stage1_params(&mut params, &cfg, 3);
        (cfg, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, params) = store();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, 1, 1234, &cfg, &params).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.manifest.stage, 1);
        assert_eq!(loaded.manifest.step, 1234);
        assert_eq!(loaded.params, params);
        save(&p2, 1, 1234, &loaded.manifest.config, &loaded.params).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn unknown_version_rejected() {
        let (cfg, params) = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        save(&p, 1, 0, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 99;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load(&p),
            Err(Error::CheckpointVersion { got: 99, .. })
        ));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let (cfg, params) = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save(&p, 1, 0, &cfg, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 64]).unwrap();
        match load(&p) {
            Err(Error::CheckpointTruncated { key }) => {
                assert!(!key.is_empty());
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
