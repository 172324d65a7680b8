use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{EpochMetrics, Trainer};
use super::{TrainConfig, TrainError};
use crate::corpus::{Problem, Vocabulary};
use crate::diff::{Adam, ParamStore, Tensor};
use crate::knowledge::KnowledgePrior;
use crate::rng::RngState;
use crate::solver::{EdgeMode, Model};

pub const CHECKPOINT_FORMAT: &str = "mwp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngStates {
    pub shuffle: RngState,
    pub gumbel: RngState,
    pub dropout: RngState,
}

/// Complete training state as a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub edge_mode: EdgeMode,
    pub prior: KnowledgePrior,
    pub params: Vec<NamedTensor>,
    /// Parameters at the best validation epoch.
    pub best_params: Vec<NamedTensor>,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub since_best: usize,
    pub stopped: bool,
    pub rng: RngStates,
    pub metrics: Vec<EpochMetrics>,
}

fn export(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(_, name, t)| NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Copies `tensors` into a store with the same names, order and shapes.
fn import(store: &mut ParamStore, tensors: &[NamedTensor]) -> Result<(), TrainError> {
    if store.len() != tensors.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(tensors) {
        let (name, shape) = (store.name(id).to_string(), store.get(id).shape().to_vec());
        if name != t.name || shape != t.shape {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                t.name, t.shape, name, shape
            )));
        }
        *store.get_mut(id) = Tensor::new(t.shape.clone(), t.data.clone())
            .map_err(|e| TrainError::Checkpoint(format!("tensor {}: {e}", t.name)))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: t.config.clone(),
            vocab: t.model.vocab.clone(),
            edge_mode: t.model.edge_mode.clone(),
            prior: t.prior.clone(),
            params: export(&t.store),
            best_params: export(&t.best_store),
            optimizer: t.adam.clone(),
            epoch: t.epoch,
            best_epoch: t.best_epoch,
            best_val: t.best_val,
            since_best: t.since_best,
            stopped: t.stopped,
            rng: RngStates {
                shuffle: RngState::capture(&t.shuffle),
                gumbel: RngState::capture(&t.gumbel),
                dropout: RngState::capture(&t.dropout),
            },
            metrics: t.metrics.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header =
            serde_json::from_slice(bytes).map_err(|e| TrainError::Checkpoint(format!("unreadable: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        serde_json::from_slice(bytes).map_err(|e| TrainError::Checkpoint(format!("malformed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    fn fresh_model(&self) -> (Model, ParamStore) {
        Model::new(
            self.config.model.clone(),
            self.vocab.clone(),
            self.edge_mode.clone(),
            self.config.knowledge.init_prob(),
            self.config.train.seed,
        )
    }

    /// The model with its best-validation parameters.
    pub fn best_model(&self) -> Result<(Model, ParamStore), TrainError> {
        let (model, mut store) = self.fresh_model();
        import(&mut store, &self.best_params)?;
        Ok((model, store))
    }

    /// Loads the best parameters into an existing store, which must have been
    /// built for the same architecture.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), TrainError> {
        import(store, &self.best_params)
    }

    /// Rebuilds the trainer to continue exactly where it stopped.
    pub fn resume(&self, train: Vec<Problem>, validation: Vec<Problem>) -> Result<Trainer, TrainError> {
        let (model, mut store) = self.fresh_model();
        import(&mut store, &self.params)?;
        let mut best_store = store.clone();
        import(&mut best_store, &self.best_params)?;
        let mut t = Trainer::new(self.config.clone(), model, store, self.prior.clone(), train, validation)?;
        let restore = |s: &RngState| s.restore().map_err(TrainError::Checkpoint);
        t.adam = self.optimizer.clone();
        t.shuffle = restore(&self.rng.shuffle)?;
        t.gumbel = restore(&self.rng.gumbel)?;
        t.dropout = restore(&self.rng.dropout)?;
        t.epoch = self.epoch;
        t.best_epoch = self.best_epoch;
        t.best_val = self.best_val;
        t.best_store = best_store;
        t.since_best = self.since_best;
        t.stopped = self.stopped;
        t.metrics = self.metrics.clone();
        Ok(t)
    }
}
