use thiserror::Error;

use super::graph::EdgeValues;
use super::{candidate_symbol, Batch, Model, SolverError};
use crate::corpus::{parse_prefix, Expr, Problem, Symbol};
use crate::diff::{ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum DecodeFailure {
    #[error("prefix still open after {0} symbols")]
    Unclosed(usize),
    #[error("emitted prefix does not parse: {0}")]
    Parse(String),
}

/// Greedy output for one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub symbols: Vec<Symbol>,
    pub tokens: Vec<String>,
    pub expr: Result<Expr, DecodeFailure>,
}

/// Number of symbols after which a prefix closes (its pending-operand count,
/// starting at 1, reaches 0), if it does.
pub fn closing_length(symbols: &[Symbol]) -> Option<usize> {
    let mut pending = 1i64;
    for (i, s) in symbols.iter().enumerate() {
        pending += s.arity_delta();
        if pending == 0 {
            return Some(i + 1);
        }
    }
    None
}

impl Model {
    /// Greedy decoding with evaluation-time edges.
    pub fn greedy_decode(&self, store: &ParamStore, problems: &[&Problem]) -> Result<Vec<Decoded>, SolverError> {
        let batch = self.batch(problems, false)?;
        let mut tape = Tape::eval();
        let edges = self.eval_edges(&mut tape, store, &batch)?;
        self.decode_batch(&mut tape, store, &batch, &edges)
    }

    /// Argmax decoding of every problem in `batch`. A problem stops when its
    /// pending-operand count reaches zero; one still open after
    /// `max_decode_len` symbols fails.
    pub fn decode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        edges: &EdgeValues,
    ) -> Result<Vec<Decoded>, SolverError> {
        let symbols = &self.vocab.symbols;
        let ctx = self.prepare(tape, store, batch, edges, None)?;
        let v = batch.num_candidates();
        let mut s = ctx.s1;
        let mut pending = vec![1i64; batch.size];
        let mut emitted: Vec<Vec<Symbol>> = vec![Vec::new(); batch.size];
        for _ in 0..self.config.max_decode_len {
            if pending.iter().all(|&p| p == 0) {
                break;
            }
            let out = self.step(tape, store, batch, &ctx, s)?;
            let logits = tape.value(out.logits).clone();
            let mut choices = vec![0; batch.size];
            let mut active = vec![0.0; batch.size];
            for b in 0..batch.size {
                if pending[b] == 0 {
                    continue;
                }
                let allowed = v - batch.max_slots + batch.num_slots(b);
                let row = &logits.row_slice(b)[..allowed];
                let best = (0..allowed).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                let sym = candidate_symbol(best, symbols);
                emitted[b].push(sym);
                pending[b] += sym.arity_delta();
                choices[b] = best;
                active[b] = 1.0;
            }
            s = self.feed(tape, store, batch, &ctx, &out, s, &choices, &active)?;
        }
        Ok(emitted
            .into_iter()
            .zip(pending)
            .enumerate()
            .map(|(b, (syms, open))| {
                let tokens: Vec<String> = syms.iter().map(|&x| symbols.token(x)).collect();
                let expr = if open != 0 {
                    Err(DecodeFailure::Unclosed(syms.len()))
                } else {
                    parse_prefix(&tokens, batch.num_slots(b), symbols).map_err(|e| DecodeFailure::Parse(e.to_string()))
                };
                Decoded {
                    symbols: syms,
                    tokens,
                    expr,
                }
            })
            .collect())
    }
}
