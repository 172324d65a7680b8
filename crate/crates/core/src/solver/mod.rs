//! The expression solver: a sequence encoder, the word-graph refinement of
//! word features, the per-step word-to-operator update, and a recurrent
//! prefix decoder. Everything runs on padded batches.

mod batch;
mod decode;
mod graph;
mod model;
mod params;

pub use batch::{candidate_index, candidate_symbol, Batch, BatchEdges};
pub use decode::{closing_length, DecodeFailure, Decoded};
pub use graph::{batch_logits, edge_values, EdgeRef, EdgeSource, EdgeValues};
pub use model::{EdgeMode, Encoded, Model, StepOutput};
pub use params::{Gru, Linear, Norm, SolverParams, SplitLinear};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::TensorError;
use crate::knowledge::KnowledgeError;

pub const DEFAULT_MAX_DECODE_LEN: usize = 15;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("problem {0} has no tokens")]
    EmptyProblem(String),
    #[error("problem {0}: slot NUM{1} does not occur in the text")]
    MissingSlot(String, usize),
    #[error("problem {0}: gold prefix not decodable: {1}")]
    BadTarget(String, String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Bidirectional gated recurrent encoder.
    #[default]
    Birnn,
    /// Token embeddings plus their masked mean.
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub backbone: Backbone,
    pub use_se: bool,
    pub use_re: bool,
    /// Dropout on input embeddings while training.
    pub dropout: f64,
    /// Standard deviation of embedding initialization.
    pub init_std: f64,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            backbone: Backbone::Birnn,
            use_se: true,
            use_re: true,
            dropout: 0.5,
            init_std: 0.3,
            max_decode_len: DEFAULT_MAX_DECODE_LEN,
        }
    }
}
