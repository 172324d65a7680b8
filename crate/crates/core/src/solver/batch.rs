use std::collections::BTreeSet;

use super::SolverError;
use crate::corpus::{slot_index, Problem, Symbol, Symbols, TokenKind, Vocabulary};

/// Edges instantiated by one batch: every pair of distinct words occurring in
/// the batch, and every such word with every operator.
///
/// Edge values live in one vector laid out as `[ww..., wo..., 0, 1]`; the
/// trailing constants fill non-word and self-loop entries of the adjacency
/// matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEdges {
    pub words: Vec<usize>,
    pub ww_pairs: Vec<(usize, usize)>,
    pub wo_pairs: Vec<(usize, usize)>,
    num_operators: usize,
}

impl BatchEdges {
    pub fn new(words: BTreeSet<usize>, num_operators: usize) -> Self {
        let words: Vec<usize> = words.into_iter().collect();
        let m = words.len();
        let ww_pairs = (0..m)
            .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
            .map(|(a, b)| (words[a], words[b]))
            .collect();
        let wo_pairs = words.iter().flat_map(|&w| (0..num_operators).map(move |c| (w, c))).collect();
        Self {
            words,
            ww_pairs,
            wo_pairs,
            num_operators,
        }
    }

    fn local(&self, word: usize) -> usize {
        self.words.binary_search(&word).expect("word belongs to the batch")
    }

    pub fn num_edges(&self) -> usize {
        self.ww_pairs.len() + self.wo_pairs.len()
    }

    pub fn zero_slot(&self) -> usize {
        self.num_edges()
    }

    pub fn one_slot(&self) -> usize {
        self.num_edges() + 1
    }

    /// Position of the word–word edge between two distinct batch words.
    pub fn ww_slot(&self, i: usize, j: usize) -> usize {
        let (a, b) = (self.local(i.min(j)), self.local(i.max(j)));
        let m = self.words.len();
        // Row-major index into the strict upper triangle.
        a * m - a * (a + 1) / 2 + (b - a - 1)
    }

    pub fn wo_slot(&self, i: usize, c: usize) -> usize {
        self.ww_pairs.len() + self.local(i) * self.num_operators + c
    }
}

/// Padded, index-mapped view of a list of problems.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// Padded token count per problem.
    pub width: usize,
    pub lengths: Vec<usize>,
    /// Embedding row per padded position, problem-major.
    pub token_rows: Vec<usize>,
    pub mask: Vec<f64>,
    pub word_at: Vec<Option<usize>>,
    /// Token position of each slot `NUM1..NUMk`, per problem.
    pub slot_positions: Vec<Vec<usize>>,
    pub max_slots: usize,
    pub num_operators: usize,
    pub num_constants: usize,
    /// Gold candidate indices per problem (empty when decoding only).
    pub targets: Vec<Vec<usize>>,
    pub edges: BatchEdges,
    /// Gather indices of `A_E + I` into the edge vector, `[size * width, width]`.
    pub ae_index: Vec<usize>,
    /// Gather indices of `A_D`, `[size * C, width]`.
    pub ad_index: Vec<usize>,
}

impl Batch {
    pub fn new(problems: &[&Problem], vocab: &Vocabulary, with_targets: bool) -> Result<Self, SolverError> {
        if problems.is_empty() {
            return Err(SolverError::EmptyBatch);
        }
        let symbols: &Symbols = &vocab.symbols;
        let size = problems.len();
        let width = problems.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
        if let Some(p) = problems.iter().find(|p| p.tokens.is_empty()) {
            return Err(SolverError::EmptyProblem(p.id.clone()));
        }
        let c = symbols.num_operators();
        let k_const = symbols.constants.len();
        let mut token_rows = vec![vocab.embedding_row(TokenKind::Pad); size * width];
        let mut mask = vec![0.0; size * width];
        let mut word_at = vec![None; size * width];
        let mut slot_positions = Vec::with_capacity(size);
        let mut words = BTreeSet::new();
        for (b, p) in problems.iter().enumerate() {
            let mut slots = vec![None; p.num_slots()];
            for (t, tok) in p.tokens.iter().enumerate() {
                let kind = vocab.kind(tok);
                let at = b * width + t;
                token_rows[at] = vocab.embedding_row(kind);
                mask[at] = 1.0;
                if let TokenKind::Word(w) = kind {
                    word_at[at] = Some(w);
                    words.insert(w);
                }
                if let Some(i) = slot_index(tok) {
                    if i <= slots.len() && slots[i - 1].is_none() {
                        slots[i - 1] = Some(t);
                    }
                }
            }
            let slots = slots
                .into_iter()
                .enumerate()
                .map(|(i, s)| s.ok_or_else(|| SolverError::MissingSlot(p.id.clone(), i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            slot_positions.push(slots);
        }
        let max_slots = slot_positions.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(size);
        if with_targets {
            for p in problems {
                let k = p.num_slots();
                let t = p
                    .prefix
                    .iter()
                    .map(|tok| {
                        let sym = symbols
                            .symbol(tok, k)
                            .map_err(|e| SolverError::BadTarget(p.id.clone(), e.to_string()))?;
                        Ok(candidate_index(sym, symbols))
                    })
                    .collect::<Result<Vec<_>, SolverError>>()?;
                if t.is_empty() {
                    return Err(SolverError::BadTarget(p.id.clone(), "empty prefix".into()));
                }
                targets.push(t);
            }
        }
        let edges = BatchEdges::new(words, c);
        let mut ae_index = vec![edges.zero_slot(); size * width * width];
        let mut ad_index = vec![edges.zero_slot(); size * c * width];
        for b in 0..size {
            for i in 0..width {
                let row = (b * width + i) * width;
                ae_index[row + i] = edges.one_slot();
                let Some(wi) = word_at[b * width + i] else { continue };
                for j in 0..width {
                    if let Some(wj) = word_at[b * width + j] {
                        if wi != wj {
                            ae_index[row + j] = edges.ww_slot(wi, wj);
                        }
                    }
                }
                for op in 0..c {
                    ad_index[(b * c + op) * width + i] = edges.wo_slot(wi, op);
                }
            }
        }
        Ok(Self {
            size,
            width,
            lengths: problems.iter().map(|p| p.tokens.len()).collect(),
            token_rows,
            mask,
            word_at,
            slot_positions,
            max_slots,
            num_operators: c,
            num_constants: k_const,
            targets,
            edges,
            ae_index,
            ad_index,
        })
    }

    /// Candidates per problem: operators, constants, then padded slots.
    pub fn num_candidates(&self) -> usize {
        self.num_operators + self.num_constants + self.max_slots
    }

    pub fn num_slots(&self, b: usize) -> usize {
        self.slot_positions[b].len()
    }

    pub fn max_target_len(&self) -> usize {
        self.targets.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Candidate layout shared by scoring and decoding.
pub fn candidate_index(sym: Symbol, symbols: &Symbols) -> usize {
    let c = symbols.num_operators();
    match sym {
        Symbol::Op(op) => symbols.operator_index(op).expect("operator in symbol table"),
        Symbol::Const(i) => c + i,
        Symbol::Slot(i) => c + symbols.constants.len() + i - 1,
    }
}

pub fn candidate_symbol(index: usize, symbols: &Symbols) -> Symbol {
    let c = symbols.num_operators();
    let k = symbols.constants.len();
    if index < c {
        Symbol::Op(symbols.operators[index])
    } else if index < c + k {
        Symbol::Const(index - c)
    } else {
        Symbol::Slot(index - c - k + 1)
    }
}
