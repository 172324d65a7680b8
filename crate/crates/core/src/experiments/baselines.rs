use std::collections::{BTreeSet, HashSet};

use rand::Rng;

use super::{ExperimentError, LpConfig};
use crate::corpus::{Problem, Vocabulary};
use crate::diff::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::knowledge::{rank_edges, KnowledgeEncoder, KnowledgePosterior, PROB_CLAMP};
use crate::rng::{stream, Stream};

/// Result of the supervised link-prediction baseline.
pub struct LpOutcome {
    pub posterior: KnowledgePosterior,
    /// Binary cross-entropy of the last epoch.
    pub final_loss: f64,
}

/// Fits a fresh knowledge encoder to the known word–word edges alone:
/// binary cross-entropy with the known edges as positives and, each epoch, a
/// new uniform draw of `negatives` unknown pairs per positive.
pub fn lp_baseline(
    vocab: &Vocabulary,
    known: &BTreeSet<(usize, usize)>,
    dim: usize,
    config: &LpConfig,
    seed: u64,
) -> Result<LpOutcome, ExperimentError> {
    if known.is_empty() {
        return Err(ExperimentError::NoKnownEdges);
    }
    let n = vocab.num_words();
    let mut rng = stream(seed, Stream::Baseline);
    let mut store = ParamStore::new();
    let encoder = KnowledgeEncoder::new(&mut store, n, vocab.symbols.num_operators(), dim, 0.5, &mut rng);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let positives: Vec<(usize, usize)> = known.iter().copied().collect();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let wanted = (positives.len() * config.negatives).min(total_pairs.saturating_sub(positives.len()));
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        let mut pairs = positives.clone();
        let mut drawn = HashSet::new();
        while drawn.len() < wanted {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let e = (i.min(j), i.max(j));
            if i != j && !known.contains(&e) && drawn.insert(e) {
                pairs.push(e);
            }
        }
        let labels: Vec<f64> = (0..pairs.len()).map(|k| if k < positives.len() { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::training();
        let logits = encoder.ww_logits(&mut tape, &store, &pairs)?;
        let loss = binary_cross_entropy(&mut tape, logits, labels)?;
        final_loss = tape.value(loss).item();
        let grads = tape.backward(loss, &store).map_err(crate::knowledge::KnowledgeError::from)?;
        adam.update(&mut store, &grads).map_err(crate::knowledge::KnowledgeError::from)?;
    }
    Ok(LpOutcome {
        posterior: encoder.posterior(&store)?,
        final_loss,
    })
}

/// Mean BCE of logits `[P, 1]` against 0/1 labels.
fn binary_cross_entropy(
    tape: &mut Tape,
    logits: crate::diff::Var,
    labels: Vec<f64>,
) -> Result<crate::diff::Var, crate::knowledge::KnowledgeError> {
    let shape = tape.shape(logits).to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), labels.clone())?)?;
    let not_y = tape.constant(Tensor::new(shape, labels.iter().map(|v| 1.0 - v).collect())?)?;
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let a = tape.mul(y, lp)?;
    let b = tape.mul(not_y, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Distinct vocabulary words of each problem.
fn word_sets(problems: &[Problem], vocab: &Vocabulary) -> Vec<BTreeSet<usize>> {
    problems
        .iter()
        .map(|p| p.tokens.iter().filter_map(|t| vocab.word_index(t)).collect())
        .collect()
}

fn all_pairs(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<((usize, usize), f64)> {
    let edges: Vec<((usize, usize), f64)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| ((i, j), score(i, j)))
        .collect();
    rank_edges(&edges, &HashSet::new())
}

/// Word pairs ranked by the number of problems containing both words.
pub fn cooccur_ranking(problems: &[Problem], vocab: &Vocabulary) -> Vec<((usize, usize), f64)> {
    let n = vocab.num_words();
    let mut counts = vec![0.0; n * n];
    for words in word_sets(problems, vocab) {
        let w: Vec<usize> = words.into_iter().collect();
        for (a, &i) in w.iter().enumerate() {
            for &j in &w[a + 1..] {
                counts[i * n + j] += 1.0;
            }
        }
    }
    all_pairs(n, |i, j| counts[i * n + j])
}

/// Word pairs ranked by the cosine similarity of their tf-idf vectors over
/// problems, with `idf = ln(|D| / df)`. Words with a zero vector score 0.
pub fn tfidf_ranking(problems: &[Problem], vocab: &Vocabulary) -> Vec<((usize, usize), f64)> {
    let n = vocab.num_words();
    let docs = problems.len() as f64;
    let mut df = vec![0usize; n];
    let mut tf: Vec<Vec<(usize, f64)>> = Vec::with_capacity(problems.len());
    for p in problems {
        let mut counts = std::collections::BTreeMap::new();
        for w in p.tokens.iter().filter_map(|t| vocab.word_index(t)) {
            *counts.entry(w).or_insert(0.0) += 1.0;
        }
        for &w in counts.keys() {
            df[w] += 1;
        }
        tf.push(counts.into_iter().collect());
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { (docs / d as f64).ln() })
        .collect();
    let mut dot = vec![0.0; n * n];
    let mut norm = vec![0.0; n];
    for doc in &tf {
        let v: Vec<(usize, f64)> = doc.iter().map(|&(w, c)| (w, c * idf[w])).collect();
        for (a, &(i, x)) in v.iter().enumerate() {
            norm[i] += x * x;
            for &(j, y) in &v[a + 1..] {
                dot[i * n + j] += x * y;
            }
        }
    }
    all_pairs(n, |i, j| {
        let d = (norm[i] * norm[j]).sqrt();
        if d > 0.0 {
            dot[i * n + j] / d
        } else {
            0.0
        }
    })
}
