//! ELBO training: temperature schedule, loss, the epoch loop with early
//! stopping, and checkpoints.

mod checkpoint;
mod trainer;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use trainer::{EpochMetrics, Trainer, METRICS_HEADER};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{evaluate_expression, answers_match, Problem};
use crate::diff::{ParamStore, Tape, TensorError, Var};
use crate::knowledge::{kl_to_prior, KnowledgeError, KnowledgePrior, Relaxation};
use crate::solver::{Batch, Decoded, EdgeRef, Model, ModelConfig, SolverError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value produced by `{op}` in epoch {epoch}, batch {batch}")]
    NonFinite { op: &'static str, epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training problems")]
    NoData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint file {0}: {1}")]
    Io(String, std::io::Error),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where the adjacency edges come from during training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSetting {
    /// Learned by the knowledge encoder under the prior.
    #[default]
    Learned,
    /// Clamped to the planted graph's binary edges.
    Planted,
    /// All edges 0: the bare backbone.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    /// Prior edge probability for unknown edges.
    pub base_prob: f64,
    /// Prior edge probability for the known edges.
    pub known_prob: f64,
    /// Fraction of true word-word edges given `known_prob`.
    pub alpha: f64,
    /// Edge probability of the untrained encoder; `base_prob` when unset.
    pub init_prob: Option<f64>,
    pub lambda_kl: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub relaxation: Relaxation,
    pub edges: EdgeSetting,
}

impl KnowledgeConfig {
    pub fn init_prob(&self) -> f64 {
        self.init_prob.unwrap_or(self.base_prob)
    }
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            base_prob: crate::knowledge::DEFAULT_BASE_PROB,
            known_prob: crate::knowledge::DEFAULT_KNOWN_PROB,
            alpha: 0.2,
            init_prob: None,
            lambda_kl: 1.0,
            tau_start: 0.5,
            tau_end: 0.1,
            relaxation: Relaxation::Logistic,
            edges: EdgeSetting::Learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            lr: 1e-3,
            patience: 20,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub knowledge: KnowledgeConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let k = &self.knowledge;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(k.tau_start >= k.tau_end && k.tau_end > 0.0) {
            return bad(format!("need tau_start >= tau_end > 0, got {} and {}", k.tau_start, k.tau_end));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.model.dropout));
        }
        if !(0.0..=1.0).contains(&k.alpha) {
            return bad(format!("alpha {} outside [0, 1]", k.alpha));
        }
        for (name, p) in [("base_prob", k.base_prob), ("known_prob", k.known_prob), ("init_prob", k.init_prob())] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} {p} outside (0, 1)"));
            }
        }
        if k.lambda_kl < 0.0 {
            return bad(format!("lambda_kl {} is negative", k.lambda_kl));
        }
        if self.model.dim == 0 || self.train.batch_size == 0 {
            return bad("dim and batch_size must be positive".into());
        }
        if self.train.lr <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.train.lr));
        }
        Ok(())
    }
}

/// Linear interpolation from `start` at step 0 to `end` at `total`.
pub fn temperature_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = step.min(total) as f64 / total as f64;
    start + (end - start) * frac
}

/// Loss of one batch and its two parts.
pub struct ElboTerms {
    pub loss: Var,
    pub nll: f64,
    pub kl: f64,
}

/// `Σ NLL + λ · KL` for one batch, with one relaxed sample per batch edge
/// shared by all problems of the batch. Fixed-edge models have no KL term.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    prior: &KnowledgePrior,
    knowledge: &KnowledgeConfig,
    tau: f64,
    gumbel: &mut ChaCha8Rng,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<ElboTerms, TrainError> {
    let edges = model.train_edges(tape, store, batch, tau, knowledge.relaxation, gumbel)?;
    let nll = model.sequence_nll(tape, store, batch, &edges, dropout)?;
    let nll_value = tape.value(nll).item();
    match edges.logits {
        Some(logits) if knowledge.lambda_kl > 0.0 => {
            let deltas: Vec<f64> = batch
                .edges
                .refs()
                .map(|e| match e {
                    EdgeRef::Ww(i, j) => prior.ww(i, j),
                    EdgeRef::Wo(i, c) => prior.wo(i, c),
                })
                .collect();
            let kl = kl_to_prior(tape, logits, &deltas)?;
            let kl_value = tape.value(kl).item();
            let weighted = tape.scale(kl, knowledge.lambda_kl)?;
            let loss = tape.add(nll, weighted)?;
            Ok(ElboTerms {
                loss,
                nll: nll_value,
                kl: kl_value,
            })
        }
        _ => Ok(ElboTerms {
            loss: nll,
            nll: nll_value,
            kl: 0.0,
        }),
    }
}

/// Whether a decoded expression evaluates to the gold answer.
pub fn is_correct(decoded: &Decoded, problem: &Problem, model: &Model) -> bool {
    match &decoded.expr {
        Ok(expr) => evaluate_expression(expr, &problem.number_values, &model.vocab.symbols)
            .map(|v| answers_match(v, problem.answer))
            .unwrap_or(false),
        Err(_) => false,
    }
}

pub const EVAL_BATCH: usize = 64;

/// Greedy-decodes `problems` and returns the fraction answered correctly with
/// the per-problem outputs.
pub fn evaluate(model: &Model, store: &ParamStore, problems: &[Problem]) -> Result<(f64, Vec<(Decoded, bool)>), TrainError> {
    if problems.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut out = Vec::with_capacity(problems.len());
    for chunk in problems.chunks(EVAL_BATCH) {
        let refs: Vec<&Problem> = chunk.iter().collect();
        let decoded = model.greedy_decode(store, &refs)?;
        for (d, p) in decoded.into_iter().zip(chunk) {
            let ok = is_correct(&d, p, model);
            out.push((d, ok));
        }
    }
    let correct = out.iter().filter(|(_, ok)| *ok).count();
    Ok((correct as f64 / problems.len() as f64, out))
}

#[cfg(test)]
mod tests;
