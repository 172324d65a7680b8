use super::ExperimentError;
use crate::corpus::Problem;
use crate::diff::{ParamStore, Tape};
use crate::solver::{edge_values, EdgeMode, EdgeRef, EdgeSource, Model};
use crate::training::EVAL_BATCH;

/// Effect of one edge on the gold log-likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct Influence {
    pub edge: EdgeRef,
    /// Mean over applicable problems.
    pub delta: f64,
    /// `log p(gold | edge = high) − log p(gold | edge = low)` per applicable
    /// problem, in input order.
    pub per_problem: Vec<f64>,
    pub problem_ids: Vec<String>,
}

impl Influence {
    pub fn positive_fraction(&self) -> f64 {
        self.per_problem.iter().filter(|d| **d > 0.0).count() as f64 / self.per_problem.len() as f64
    }
}

fn canonical(edge: EdgeRef) -> EdgeRef {
    match edge {
        EdgeRef::Ww(i, j) => EdgeRef::Ww(i.min(j), i.max(j)),
        e => e,
    }
}

/// Whether a problem contains the word(s) of an edge.
fn applies(model: &Model, problem: &Problem, edge: EdgeRef) -> bool {
    let has = |w: usize| problem.tokens.iter().any(|t| model.vocab.word_index(t) == Some(w));
    match edge {
        EdgeRef::Ww(i, j) => i != j && has(i) && has(j),
        EdgeRef::Wo(i, _) => has(i),
    }
}

/// `edge_influence_between` with the edge clamped to 1 and to 0.
pub fn edge_influence(model: &Model, store: &ParamStore, problems: &[Problem], edge: EdgeRef) -> Result<Influence, ExperimentError> {
    edge_influence_between(model, store, problems, edge, 1.0, 0.0)
}

/// Log-likelihood difference of the gold prefixes when `edge` is set to
/// `high` versus `low`, every other edge at its evaluation value (posterior
/// probability, or the fixed set). Only problems containing the edge's words
/// count.
pub fn edge_influence_between(
    model: &Model,
    store: &ParamStore,
    problems: &[Problem],
    edge: EdgeRef,
    high: f64,
    low: f64,
) -> Result<Influence, ExperimentError> {
    let edge = canonical(edge);
    let applicable: Vec<&Problem> = problems.iter().filter(|p| applies(model, p, edge)).collect();
    if applicable.is_empty() {
        let words = match edge {
            EdgeRef::Ww(i, j) => format!("({}, {})", model.vocab.word(i), model.vocab.word(j)),
            EdgeRef::Wo(i, c) => format!("({}, {})", model.vocab.word(i), model.vocab.symbols.operators[c].token()),
        };
        return Err(ExperimentError::NoApplicableProblems(words));
    }
    let posterior = match model.edge_mode {
        EdgeMode::Learned => Some(model.knowledge.posterior(store)?),
        _ => None,
    };
    let base = |e: EdgeRef| -> f64 {
        match (&posterior, &model.edge_mode, e) {
            (Some(p), _, EdgeRef::Ww(i, j)) => p.ww_prob(i, j),
            (Some(p), _, EdgeRef::Wo(i, c)) => p.wo_prob(i, c),
            (None, EdgeMode::Fixed { ww, .. }, EdgeRef::Ww(i, j)) => f64::from(u8::from(ww.contains(&(i.min(j), i.max(j))))),
            (None, EdgeMode::Fixed { wo, .. }, EdgeRef::Wo(i, c)) => f64::from(u8::from(wo.contains(&(i, c)))),
            (None, EdgeMode::Learned, _) => unreachable!("learned models always have a posterior"),
        }
    };
    let mut per_problem = Vec::with_capacity(applicable.len());
    for chunk in applicable.chunks(EVAL_BATCH) {
        let batch = model.batch(chunk, true)?;
        let nll = |value: f64| -> Result<Vec<f64>, ExperimentError> {
            let f = |e: EdgeRef| if e == edge { value } else { base(e) };
            let mut tape = Tape::eval();
            let values = edge_values(&mut tape, store, &model.knowledge, &batch.edges, EdgeSource::Fixed(&f))?;
            Ok(model.problem_nll(&mut tape, store, &batch, &values)?)
        };
        let at_high = nll(high)?;
        let at_low = nll(low)?;
        per_problem.extend(at_low.iter().zip(&at_high).map(|(lo, hi)| lo - hi));
    }
    let delta = per_problem.iter().sum::<f64>() / per_problem.len() as f64;
    Ok(Influence {
        edge,
        delta,
        per_problem,
        problem_ids: applicable.iter().map(|p| p.id.clone()).collect(),
    })
}
