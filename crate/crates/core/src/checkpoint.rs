//! Checkpoint directories: a TOML manifest naming every parameter and one
//! tensor dump per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{Missformer, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_FORMAT: &str = "missformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: CheckpointMeta,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut params = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("param_{i:04}.mstf");
            let path = dir.join(&file);
            write_tensor(t, &path)?;
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                sha256: sha256_hex(&fs::read(&path)?),
                file,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            model: self.model.resolved(),
            params,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    /// Loads and verifies hashes, shapes, and that the parameters fit the
    /// stored model configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let mut params = ParamStore::new();
        for e in &m.params {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path)?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Format(format!("{}: hash mismatch", e.file)));
            }
            let t = read_tensor::<f32>(&path)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: shape {:?} but manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            params.insert(e.name.clone(), t)?;
        }
        Missformer::attach(&m.model, &params)?;
        Ok(Checkpoint {
            model: m.model,
            meta: m.meta,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::micro();
        let (_, params) = Missformer::build::<f32>(&cfg, 1).unwrap();
        let ck = Checkpoint {
            model: cfg.clone(),
            meta: CheckpointMeta {
                epoch: 3,
                iteration: 6,
                mean_dsc: Some(0.5),
            },
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.model, cfg.resolved());
        assert_eq!(back.meta, ck.meta);
        for ((na, a), (nb, b)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn tampered_file_rejected() {
        let cfg = ModelConfig::micro();
        let (_, params) = Missformer::build::<f32>(&cfg, 1).unwrap();
        let ck = Checkpoint {
            model: cfg,
            meta: CheckpointMeta::default(),
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let p = dir.path().join("param_0000.mstf");
        let mut b = fs::read(&p).unwrap();
        *b.last_mut().unwrap() ^= 0x40;
        fs::write(&p, b).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
