use std::collections::BTreeMap;
use std::path::Path;

use numcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub best_sr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameter values by name plus a manifest. Stored as JSON; floats are
/// written in shortest round-trip form, so reloading is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, manifest: CheckpointManifest) -> Checkpoint {
        let tensors = store
            .ids()
            .map(|id| {
                let t = store.value(id);
                (store.name(id).to_string(), StoredTensor { shape: t.shape().to_vec(), values: t.data().to_vec() })
            })
            .collect();
        Checkpoint { manifest, tensors }
    }

    /// Writes every stored tensor into `store`. Names and shapes must match
    /// exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, st) in &self.tensors {
            let id = store.id(name).map_err(|_| ModelError::Checkpoint(format!("unknown tensor {name:?}")))?;
            let t = Tensor::new(st.shape.clone(), st.values.clone())?;
            store.set_value(id, t).map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Checkpoint> {
        serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let s = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&s)
    }
}
