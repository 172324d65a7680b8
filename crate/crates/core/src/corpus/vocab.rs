use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::expr::Symbols;
use super::tokenize::slot_index;
use super::Problem;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "UNK";
pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_SLOTS: usize = 8;

/// How a surface token is represented in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Pad,
    Unk,
    /// 1-based number slot.
    Slot(usize),
    /// Index into the knowledge-graph word list.
    Word(usize),
}

/// Word list plus the special rows of the embedding table.
///
/// Embedding rows are laid out as `[PAD, UNK, NUM1..NUMmax, words...]`; only
/// `words` take part in the knowledge graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<usize>,
    pub min_count: usize,
    pub max_slots: usize,
    pub symbols: Symbols,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
    counts: Vec<usize>,
    min_count: usize,
    max_slots: usize,
    symbols: Symbols,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Self::from_words(r.words, r.counts, r.min_count, r.max_slots, r.symbols)
    }
}

impl Vocabulary {
    /// Words seen at least `min_count` times, most frequent first (ties by
    /// spelling). Slot markers, operator and constant tokens never enter the
    /// word list.
    pub fn build(problems: &[Problem], min_count: usize, symbols: Symbols) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in problems {
            for t in &p.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && Self::is_word_candidate(w, &symbols))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(
            kept.iter().map(|(w, _)| w.to_string()).collect(),
            kept.iter().map(|(_, c)| *c).collect(),
            min_count,
            DEFAULT_MAX_SLOTS,
            symbols,
        )
    }

    pub fn from_words(
        words: Vec<String>,
        counts: Vec<usize>,
        min_count: usize,
        max_slots: usize,
        symbols: Symbols,
    ) -> Self {
        let mut v = Self {
            words,
            counts,
            min_count,
            max_slots,
            symbols,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn is_word_candidate(token: &str, symbols: &Symbols) -> bool {
        slot_index(token).is_none() && token != UNK && token != PAD && !symbols.is_symbol_token(token)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// N, the number of knowledge-graph words.
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn kind(&self, token: &str) -> TokenKind {
        if token == PAD {
            return TokenKind::Pad;
        }
        if let Some(i) = slot_index(token) {
            return if i <= self.max_slots {
                TokenKind::Slot(i)
            } else {
                TokenKind::Unk
            };
        }
        match self.word_index(token) {
            Some(i) => TokenKind::Word(i),
            None => TokenKind::Unk,
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenKind> {
        tokens.iter().map(|t| self.kind(t)).collect()
    }

    pub fn num_embedding_rows(&self) -> usize {
        2 + self.max_slots + self.words.len()
    }

    pub fn embedding_row(&self, kind: TokenKind) -> usize {
        match kind {
            TokenKind::Pad => 0,
            TokenKind::Unk => 1,
            TokenKind::Slot(i) => 1 + i,
            TokenKind::Word(w) => 2 + self.max_slots + w,
        }
    }

    pub fn word_embedding_row(&self, word: usize) -> usize {
        self.embedding_row(TokenKind::Word(word))
    }
}
