//! Problems, tokenization, vocabulary, prefix expressions, and JSONL corpus files.

mod expr;
mod io;
mod tokenize;
mod vocab;

pub use expr::{
    answers_match, evaluate_expression, parse_prefix, Constant, EvalError, Expr, ExprError, Operator, Symbol,
    Symbols,
};
pub use io::{load_corpus, load_corpus_with, read_corpus, write_corpus, CorpusError};
pub use tokenize::{slot_marker, slot_index, tokenize, TokenizeError};
pub use vocab::{TokenKind, Vocabulary, DEFAULT_MAX_SLOTS, DEFAULT_MIN_COUNT, PAD, UNK};

use serde::{Deserialize, Serialize};

/// One math word problem with numbers abstracted to `NUM1..NUMk` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub tokens: Vec<String>,
    pub number_values: Vec<f64>,
    /// Gold expression in prefix order.
    pub prefix: Vec<String>,
    pub answer: f64,
}

impl Problem {
    pub fn num_slots(&self) -> usize {
        self.number_values.len()
    }

    pub fn gold_expression(&self, symbols: &Symbols) -> Result<Expr, ExprError> {
        parse_prefix(&self.prefix, self.num_slots(), symbols)
    }

    /// Checks that the gold expression parses and evaluates to the stored answer.
    pub fn validate(&self, symbols: &Symbols) -> Result<(), String> {
        let expr = self.gold_expression(symbols).map_err(|e| e.to_string())?;
        let value = evaluate_expression(&expr, &self.number_values, symbols).map_err(|e| e.to_string())?;
        if !answers_match(value, self.answer) {
            return Err(format!(
                "gold expression evaluates to {value}, stored answer is {}",
                self.answer
            ));
        }
        Ok(())
    }
}
