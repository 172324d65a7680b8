use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::KnowledgeError;
use crate::corpus::Vocabulary;
use crate::diff::{Tape, Tensor, Var};
use crate::rng::{stream, Stream};

pub const DEFAULT_BASE_PROB: f64 = 0.1;
pub const DEFAULT_KNOWN_PROB: f64 = 0.5;
pub const PROB_CLAMP: f64 = 1e-6;

/// Per-edge Bernoulli prior: `base` everywhere except the known word–word
/// edges, which get `known`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePrior {
    pub base: f64,
    pub known: f64,
    pub alpha: f64,
    /// Known edges as vocabulary word pairs with `i < j`.
    pub known_ww: BTreeSet<(usize, usize)>,
    /// The same edges as word strings, in sampling order.
    pub known_words: Vec<(String, String)>,
}

impl KnowledgePrior {
    pub fn uniform(base: f64) -> Self {
        Self {
            base,
            known: DEFAULT_KNOWN_PROB,
            alpha: 0.0,
            known_ww: BTreeSet::new(),
            known_words: Vec::new(),
        }
    }

    pub fn ww(&self, i: usize, j: usize) -> f64 {
        if self.known_ww.contains(&(i.min(j), i.max(j))) {
            self.known
        } else {
            self.base
        }
    }

    pub fn wo(&self, _i: usize, _c: usize) -> f64 {
        self.base
    }
}

/// Samples the known set as a prefix of one seeded permutation of the true
/// edges, so known sets for growing `alpha` are nested.
///
/// True edges are word pairs; pairs with a word outside the vocabulary can
/// still be drawn but only in-vocabulary pairs shape the prior.
pub fn build_prior(
    vocab: &Vocabulary,
    true_edges: &[(String, String)],
    alpha: f64,
    base: f64,
    known: f64,
    seed: u64,
) -> Result<KnowledgePrior, KnowledgeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(KnowledgeError::BadAlpha(alpha));
    }
    let mut edges: Vec<(String, String)> = true_edges
        .iter()
        .map(|(a, b)| if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) })
        .collect();
    edges.sort();
    edges.dedup();
    let mut rng = stream(seed, Stream::Prior);
    edges.shuffle(&mut rng);
    let count = ((alpha * edges.len() as f64) + 1e-9).floor() as usize;
    let known_words: Vec<(String, String)> = edges.into_iter().take(count).collect();
    let known_ww = known_words
        .iter()
        .filter_map(|(a, b)| {
            let (i, j) = (vocab.word_index(a)?, vocab.word_index(b)?);
            Some((i.min(j), i.max(j)))
        })
        .collect();
    Ok(KnowledgePrior {
        base,
        known,
        alpha,
        known_ww,
        known_words,
    })
}

/// `KL(Ber(p) ‖ Ber(δ))` with `p` clamped to `[1e-6, 1 − 1e-6]`.
pub fn kl_bernoulli(p: f64, delta: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    p * (p / delta).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - delta)).ln()
}

/// Summed KL between the edge posteriors `σ(logits)` (a column `[P, 1]`) and
/// per-edge prior probabilities.
pub fn kl_to_prior(tape: &mut Tape, logits: Var, deltas: &[f64]) -> Result<Var, KnowledgeError> {
    if deltas.is_empty() {
        return Err(KnowledgeError::Empty);
    }
    let shape = tape.shape(logits).to_vec();
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let ld = tape.constant(Tensor::new(shape.clone(), deltas.iter().map(|d| d.ln()).collect())?)?;
    let lnd = tape.constant(Tensor::new(shape, deltas.iter().map(|d| (1.0 - d).ln()).collect())?)?;
    let a = tape.sub(log_p, ld)?;
    let a = tape.mul(p, a)?;
    let b = tape.sub(log_q, lnd)?;
    let b = tape.mul(q, b)?;
    let t = tape.add(a, b)?;
    Ok(tape.sum(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Symbols;
    use crate::diff::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        assert!(kl_bernoulli(0.1, 0.1).abs() < 1e-15);
        // Closed form: 0.5 ln(0.5/0.1) + 0.5 ln(0.5/0.9).
        let want = 0.5 * 5f64.ln() + 0.5 * (5.0f64 / 9.0).ln();
        assert!((kl_bernoulli(0.5, 0.1) - want).abs() < 1e-12);
        assert!((want - 0.5108).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p: f64 = rng.random();
            let d: f64 = rng.random_range(0.01..0.99);
            assert!(kl_bernoulli(p, d) >= -1e-12);
        }
    }

    #[test]
    fn tape_kl_matches_scalar_and_vanishes_at_prior() {
        let logits = [-2.0, 0.0, 1.5];
        let deltas = [0.1, 0.5, 0.1];
        let mut tape = Tape::eval();
        let l = tape.constant(Tensor::matrix(3, 1, logits.to_vec()).unwrap()).unwrap();
        let kl = kl_to_prior(&mut tape, l, &deltas).unwrap();
        let want: f64 = logits
            .iter()
            .zip(&deltas)
            .map(|(&l, &d)| kl_bernoulli(crate::diff::sigmoid(l), d))
            .sum();
        assert!((tape.value(kl).item() - want).abs() < 1e-12);

        let at_prior = [(0.1f64 / 0.9).ln(), 0.0];
        let l = tape.constant(Tensor::matrix(2, 1, at_prior.to_vec()).unwrap()).unwrap();
        let kl = kl_to_prior(&mut tape, l, &[0.1, 0.5]).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn tape_kl_gradcheck() {
        let mut store = ParamStore::new();
        store.add("l", Tensor::matrix(3, 1, vec![-1.0, 0.3, 2.0]).unwrap());
        let err = crate::diff::finite_difference_check(
            |tape, s| {
                let l = tape.param(s, s.id_of("l").unwrap())?;
                Ok::<_, KnowledgeError>(kl_to_prior(tape, l, &[0.1, 0.5, 0.1])?)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn setup(n_edges: usize) -> (Vocabulary, Vec<(String, String)>) {
        let words: Vec<String> = (0..2 * n_edges).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_words(words.clone(), vec![5; words.len()], 1, 8, Symbols::default());
        let edges = (0..n_edges).map(|i| (words[2 * i].clone(), words[2 * i + 1].clone())).collect();
        (vocab, edges)
    }

    #[test]
    fn alpha_examples() {
        let (vocab, edges) = setup(40);
        let p0 = build_prior(&vocab, &edges, 0.0, 0.1, 0.5, 1).unwrap();
        assert!(p0.known_ww.is_empty());
        assert_eq!(p0.ww(0, 1), 0.1);
        let p = build_prior(&vocab, &edges, 0.2, 0.1, 0.5, 1).unwrap();
        assert_eq!(p.known_ww.len(), 8);
        assert_eq!(p.known_ww.iter().filter(|&&(i, j)| p.ww(j, i) == 0.5).count(), 8);
        let all = build_prior(&vocab, &edges, 1.0, 0.1, 0.5, 1).unwrap();
        assert_eq!(all.known_ww.len(), 40);
        assert!(build_prior(&vocab, &edges, 1.5, 0.1, 0.5, 1).is_err());
    }

    #[test]
    fn known_sets_are_nested_across_alpha() {
        let (vocab, edges) = setup(40);
        let sets: Vec<BTreeSet<(usize, usize)>> = [0.0, 0.2, 0.4, 0.6]
            .iter()
            .map(|&a| build_prior(&vocab, &edges, a, 0.1, 0.5, 9).unwrap().known_ww)
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
        assert_eq!(sets[3].len(), 24);
    }
}
