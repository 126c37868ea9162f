//! JSON model checkpoints. f64 values serialize via shortest round-trip
//! formatting, so save/load is lossless and repeated saves of the same
//! state are byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::ModelState;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn new(seed: u64, model: ModelState) -> Self {
        Checkpoint {
            schema_version: crate::SCHEMA_VERSION,
            seed,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != crate::SCHEMA_VERSION {
            return Err(CheckpointError::SchemaVersion {
                found: ckpt.schema_version,
                expected: crate::SCHEMA_VERSION,
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        let mut rng = crate::rng_from_seed(17);
        ModelState::init(&[6, 16, 8], (0..4).collect(), 12, 0.5, &mut rng)
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint::new(42, state());
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.model.classifier.weight, ckpt.model.classifier.weight);
        assert_eq!(back.model.calib.wq, ckpt.model.calib.wq);
        assert_eq!(back.model.embed.layers[0].w, ckpt.model.embed.layers[0].w);
        assert_eq!(back.model.pretrained, ckpt.model.pretrained);
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let ckpt = Checkpoint::new(7, state());
        let a = ckpt.to_json().unwrap();
        let reloaded: Checkpoint = serde_json::from_str(&a).unwrap();
        let b = reloaded.to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ckpt = Checkpoint::new(1, state());
        ckpt.schema_version = crate::SCHEMA_VERSION + 1;
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::SchemaVersion { .. })
        ));
    }
}
