use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelError, ModelSpec};
use crate::io::TensorFile;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "agenet-checkpoint/1";

/// Named tensors plus the spec and epoch they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub tag: String,
    pub state: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
        metadata.insert("model_spec".into(), serde_json::to_string(&self.spec).expect("spec json"));
        metadata.insert("epoch".into(), self.epoch.to_string());
        metadata.insert("tag".into(), self.tag.clone());
        TensorFile {
            tensors: self.state.clone(),
            metadata,
        }
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self, ModelError> {
        let meta = |k: &str| {
            file.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint(format!("missing metadata field {k:?}")))
        };
        let format = meta("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format {format:?}")));
        }
        let spec: ModelSpec = serde_json::from_str(&meta("model_spec")?)
            .map_err(|e| ModelError::Checkpoint(format!("bad model_spec: {e}")))?;
        let epoch = meta("epoch")?
            .parse()
            .map_err(|e| ModelError::Checkpoint(format!("bad epoch: {e}")))?;
        let tag = meta("tag")?;
        Ok(Checkpoint {
            spec,
            epoch,
            tag,
            state: file.tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_tensor_file().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (file, _) = TensorFile::from_bytes(bytes).map_err(ModelError::Checkpoint)?;
        Self::from_tensor_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_tensor_file().save(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgeModel, Pretrained};

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = ModelSpec {
            input_size: 32,
            ..ModelSpec::with_dropout(0.18074)
        };
        let m = AgeModel::build(spec, &Pretrained::Random { seed: 4 }, 4).unwrap();
        let ck = m.checkpoint(12, "best");
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let restored = AgeModel::from_checkpoint(&back).unwrap();
        assert_eq!(restored.state_dict(), m.state_dict());
        assert_eq!(restored.spec().dropout, 0.18074);
    }

    #[test]
    fn foreign_tensor_file_is_rejected() {
        let f = TensorFile::default();
        assert!(matches!(
            Checkpoint::from_tensor_file(f),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
