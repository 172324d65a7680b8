use rand_chacha::ChaCha8Rng;

use super::{BatchEdges, SolverError};
use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::knowledge::{relax_sample_var, KnowledgeEncoder, Relaxation};

/// One edge of the batch-local edge set, in vocabulary indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeRef {
    Ww(usize, usize),
    Wo(usize, usize),
}

/// Where the soft adjacency entries come from.
pub enum EdgeSource<'a> {
    /// Relaxed Bernoulli samples at temperature `tau` (training).
    Relaxed {
        tau: f64,
        relaxation: Relaxation,
        rng: &'a mut ChaCha8Rng,
    },
    /// Posterior probabilities `σ(logit)`.
    Expected,
    /// Externally fixed values; the encoder is not consulted.
    Fixed(&'a dyn Fn(EdgeRef) -> f64),
}

/// Edge values laid out as `[ww..., wo..., 0, 1]` (shape `[1, E + 2]`) plus
/// the logits they came from, when learned.
pub struct EdgeValues {
    pub values: Var,
    pub logits: Option<Var>,
}

impl BatchEdges {
    pub fn refs(&self) -> impl Iterator<Item = EdgeRef> + '_ {
        self.ww_pairs
            .iter()
            .map(|&(i, j)| EdgeRef::Ww(i, j))
            .chain(self.wo_pairs.iter().map(|&(i, c)| EdgeRef::Wo(i, c)))
    }
}

/// Column `[E, 1]` of logits for the batch edges, word–word first.
pub fn batch_logits(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &KnowledgeEncoder,
    edges: &BatchEdges,
) -> Result<Option<Var>, SolverError> {
    let mut parts = Vec::new();
    if !edges.ww_pairs.is_empty() {
        parts.push(encoder.ww_logits(tape, store, &edges.ww_pairs)?);
    }
    if !edges.wo_pairs.is_empty() {
        parts.push(encoder.wo_logits(tape, store, &edges.wo_pairs)?);
    }
    Ok(match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(tape.vstack(&parts)?),
    })
}

pub fn edge_values(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &KnowledgeEncoder,
    edges: &BatchEdges,
    source: EdgeSource<'_>,
) -> Result<EdgeValues, SolverError> {
    let tail = tape.constant(Tensor::row(vec![0.0, 1.0]))?;
    let e = edges.num_edges();
    let (body, logits) = match source {
        EdgeSource::Fixed(f) => {
            if e == 0 {
                (None, None)
            } else {
                let v: Vec<f64> = edges.refs().map(f).collect();
                (Some(tape.constant(Tensor::row(v))?), None)
            }
        }
        EdgeSource::Expected => match batch_logits(tape, store, encoder, edges)? {
            Some(l) => {
                let p = tape.sigmoid(l)?;
                (Some(tape.reshape(p, vec![1, e])?), Some(l))
            }
            None => (None, None),
        },
        EdgeSource::Relaxed { tau, relaxation, rng } => match batch_logits(tape, store, encoder, edges)? {
            Some(l) => {
                let noise: Vec<f64> = (0..e).map(|_| relaxation.noise(rng)).collect();
                let s = relax_sample_var(tape, l, tau, &noise)?;
                (Some(tape.reshape(s, vec![1, e])?), Some(l))
            }
            None => (None, None),
        },
    };
    let values = match body {
        Some(b) => tape.concat(&[b, tail])?,
        None => tail,
    };
    Ok(EdgeValues { values, logits })
}
