//! Versioned on-disk checkpoints.
//!
//! Layout: an 8-byte magic tag, a little-endian `u32` format version, then a
//! bincode payload holding the scalar type name, the training configuration,
//! progress counters, the model and (optionally) the optimizer state.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::CountingModel;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DACOUNT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub scalar: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub iteration: u64,
    pub model: CountingModel<T>,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: TrainConfig, epoch: usize, iteration: u64, model: CountingModel<T>, optimizer: Option<Adam<T>>) -> Self {
        Self {
            scalar: T::NAME.to_string(),
            config,
            epoch,
            iteration,
            model,
            optimizer,
        }
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let payload = bincode::serialize(ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write then rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(MAGIC)
        .and_then(|_| f.write_all(&FORMAT_VERSION.to_le_bytes()))
        .and_then(|_| f.write_all(&payload))
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version}, this build reads version {FORMAT_VERSION}",
            path.display()
        )));
    }
    // the scalar name leads the payload, so a type mismatch is reported before decoding tensors
    let scalar: String = bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if scalar != T::NAME {
        return Err(Error::Checkpoint(format!(
            "{} stores {scalar} parameters, {} requested",
            path.display(),
            T::NAME
        )));
    }
    let mut ckpt: Checkpoint<T> =
        bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.model.zero_grad();
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let cfg = TrainConfig {
            depth: 1,
            base_width: 2,
            domain_head_width: 2,
            image_size: 8,
            ..TrainConfig::default()
        };
        let model = crate::trainer::build_model(&cfg).unwrap();
        Checkpoint::new(cfg, 3, 42, model, Some(Adam::new(1e-3, 1e-4)))
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        let mut orig = c.clone();
        orig.model.zero_grad();
        back.model.zero_grad();
        assert_eq!(orig, back);
    }

    #[test]
    fn rejects_version_and_type_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
