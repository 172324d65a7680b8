use std::collections::HashMap;

use rand::Rng;

use super::KnowledgeError;
use crate::diff::{init_normal, init_uniform, sigmoid, ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer perceptron on a concatenated pair `[x, y]` (2d → d → 1). The
/// first layer is stored as separate halves so pair scores can be built from
/// per-item projections.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNet {
    pub w_left: ParamId,
    pub w_right: ParamId,
    pub bias: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl PairNet {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, out_bias: f64, rng: &mut R) -> Self {
        let half = |rng: &mut R| init_uniform(2 * d, d, rng).data()[..d * d].to_vec();
        let w_left = store.add(format!("{name}.w_left"), Tensor::matrix(d, d, half(rng)).unwrap());
        let w_right = store.add(format!("{name}.w_right"), Tensor::matrix(d, d, half(rng)).unwrap());
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d]));
        let out_w = store.add(format!("{name}.out_w"), init_uniform(d, 1, rng));
        let out_b = store.add(format!("{name}.out_b"), Tensor::full(&[1, 1], out_bias));
        Self {
            w_left,
            w_right,
            bias,
            out_w,
            out_b,
        }
    }

    /// Hidden layer for the ordered pairs `(left[k], right[k])`, given the
    /// per-item projections.
    fn hidden(&self, tape: &mut Tape, store: &ParamStore, pl: Var, pr: Var, left: &[usize], right: &[usize]) -> Result<Var, KnowledgeError> {
        let a = tape.rows(pl, left)?;
        let b = tape.rows(pr, right)?;
        let s = tape.add(a, b)?;
        let bias = tape.param(store, self.bias)?;
        let s = tape.add(s, bias)?;
        Ok(tape.relu(s)?)
    }

    fn head(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var, KnowledgeError> {
        let w = tape.param(store, self.out_w)?;
        let b = tape.param(store, self.out_b)?;
        let o = tape.matmul(hidden, w)?;
        Ok(tape.add(o, b)?)
    }
}

/// Embeddings and pair networks that score word–word and word–operator edges.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEncoder {
    pub num_words: usize,
    pub num_operators: usize,
    pub dim: usize,
    pub word_emb: ParamId,
    pub op_emb: ParamId,
    pub ww_net: PairNet,
    pub wo_net: PairNet,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl KnowledgeEncoder {
    /// Output biases start at the logit of `base_prob`, so an untrained
    /// encoder sits near the sparse prior.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        num_words: usize,
        num_operators: usize,
        dim: usize,
        base_prob: f64,
        rng: &mut R,
    ) -> Self {
        let word_emb = store.add("knowledge.word_emb", init_normal(num_words.max(1), dim, 1.0, rng));
        let op_emb = store.add("knowledge.op_emb", init_normal(num_operators.max(1), dim, 1.0, rng));
        let b = logit(base_prob.clamp(1e-6, 1.0 - 1e-6));
        let ww_net = PairNet::new(store, "knowledge.ww", dim, b, rng);
        let wo_net = PairNet::new(store, "knowledge.wo", dim, b, rng);
        Self {
            num_words,
            num_operators,
            dim,
            word_emb,
            op_emb,
            ww_net,
            wo_net,
        }
    }

    fn check_word(&self, i: usize) -> Result<(), KnowledgeError> {
        if i >= self.num_words {
            return Err(KnowledgeError::IndexOutOfRange {
                what: "word",
                index: i,
                len: self.num_words,
            });
        }
        Ok(())
    }

    /// Projects the distinct words of `pairs` once; returns the projections
    /// and the local row of each word.
    fn project_words(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        net: &PairNet,
        words: impl Iterator<Item = usize>,
    ) -> Result<(Var, Var, HashMap<usize, usize>), KnowledgeError> {
        let mut local = HashMap::new();
        let mut order = Vec::new();
        for w in words {
            self.check_word(w)?;
            local.entry(w).or_insert_with(|| {
                order.push(w);
                order.len() - 1
            });
        }
        let table = tape.param(store, self.word_emb)?;
        let emb = tape.rows(table, &order)?;
        let wl = tape.param(store, net.w_left)?;
        let wr = tape.param(store, net.w_right)?;
        let pl = tape.matmul(emb, wl)?;
        let pr = tape.matmul(emb, wr)?;
        Ok((pl, pr, local))
    }

    /// Word–word logits `[P, 1]`, averaged over both argument orders.
    pub fn ww_logits(&self, tape: &mut Tape, store: &ParamStore, pairs: &[(usize, usize)]) -> Result<Var, KnowledgeError> {
        if pairs.is_empty() {
            return Err(KnowledgeError::Empty);
        }
        let words = pairs.iter().flat_map(|&(i, j)| [i, j]);
        let (pl, pr, local) = self.project_words(tape, store, &self.ww_net, words)?;
        let left: Vec<usize> = pairs.iter().map(|p| local[&p.0]).collect();
        let right: Vec<usize> = pairs.iter().map(|p| local[&p.1]).collect();
        let h1 = self.ww_net.hidden(tape, store, pl, pr, &left, &right)?;
        let h2 = self.ww_net.hidden(tape, store, pl, pr, &right, &left)?;
        let h = tape.add(h1, h2)?;
        let h = tape.scale(h, 0.5)?;
        self.ww_net.head(tape, store, h)
    }

    /// Word–operator logits `[P, 1]` for `(word, operator)` pairs.
    pub fn wo_logits(&self, tape: &mut Tape, store: &ParamStore, pairs: &[(usize, usize)]) -> Result<Var, KnowledgeError> {
        if pairs.is_empty() {
            return Err(KnowledgeError::Empty);
        }
        for &(_, c) in pairs {
            if c >= self.num_operators {
                return Err(KnowledgeError::IndexOutOfRange {
                    what: "operator",
                    index: c,
                    len: self.num_operators,
                });
            }
        }
        let (pl, _, local) = self.project_words(tape, store, &self.wo_net, pairs.iter().map(|p| p.0))?;
        let ops = tape.param(store, self.op_emb)?;
        let wr = tape.param(store, self.wo_net.w_right)?;
        let pr = tape.matmul(ops, wr)?;
        let left: Vec<usize> = pairs.iter().map(|p| local[&p.0]).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h = self.wo_net.hidden(tape, store, pl, pr, &left, &right)?;
        self.wo_net.head(tape, store, h)
    }

    /// Dense posterior over every word pair and word–operator pair.
    pub fn posterior(&self, store: &ParamStore) -> Result<KnowledgePosterior, KnowledgeError> {
        let n = self.num_words;
        let c = self.num_operators;
        let mut ww = Tensor::zeros(&[n, n]);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        if !pairs.is_empty() {
            let mut tape = Tape::eval();
            let l = self.ww_logits(&mut tape, store, &pairs)?;
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let v = tape.value(l).data()[k];
                ww.data_mut()[i * n + j] = v;
                ww.data_mut()[j * n + i] = v;
            }
        }
        let mut wo = Tensor::zeros(&[n, c]);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..c).map(move |o| (i, o))).collect();
        if !pairs.is_empty() {
            let mut tape = Tape::eval();
            let l = self.wo_logits(&mut tape, store, &pairs)?;
            wo.data_mut().copy_from_slice(tape.value(l).data());
        }
        Ok(KnowledgePosterior {
            ww_logits: ww,
            wo_logits: wo,
        })
    }
}

/// Edge logits for every pair; the diagonal of `ww_logits` is unused.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgePosterior {
    pub ww_logits: Tensor,
    pub wo_logits: Tensor,
}

impl KnowledgePosterior {
    pub fn num_words(&self) -> usize {
        self.ww_logits.rows()
    }

    pub fn num_operators(&self) -> usize {
        self.wo_logits.cols()
    }

    pub fn ww_prob(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.ww_logits.get2(i, j))
    }

    pub fn wo_prob(&self, i: usize, c: usize) -> f64 {
        sigmoid(self.wo_logits.get2(i, c))
    }

    /// Every unordered pair `(i, j)`, `i < j`, with its probability.
    pub fn ww_edges(&self) -> Vec<((usize, usize), f64)> {
        let n = self.num_words();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| ((i, j), self.ww_prob(i, j)))
            .collect()
    }

    pub fn wo_edges(&self) -> Vec<((usize, usize), f64)> {
        let (n, c) = (self.num_words(), self.num_operators());
        (0..n)
            .flat_map(|i| (0..c).map(move |o| (i, o)))
            .map(|(i, o)| ((i, o), self.wo_prob(i, o)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(n: usize) -> (KnowledgeEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = KnowledgeEncoder::new(&mut store, n, 4, 8, 0.1, &mut rng);
        (enc, store)
    }

    #[test]
    fn ww_logits_are_symmetric() {
        let (enc, store) = encoder(12);
        let pairs: Vec<(usize, usize)> = (0..12).flat_map(|i| (0..12).map(move |j| (i, j))).filter(|p| p.0 != p.1).collect();
        let mut tape = Tape::eval();
        let l = enc.ww_logits(&mut tape, &store, &pairs).unwrap();
        let v = tape.value(l).data();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let back = pairs.iter().position(|&p| p == (j, i)).unwrap();
            assert_eq!(v[k], v[back]);
        }
    }

    #[test]
    fn batch_of_ten_pairs_gives_ten_finite_logits() {
        let (enc, store) = encoder(12);
        let pairs: Vec<(usize, usize)> = (0..10).map(|k| (k, (k + 1) % 12)).collect();
        let mut tape = Tape::eval();
        let l = enc.ww_logits(&mut tape, &store, &pairs).unwrap();
        assert_eq!(tape.shape(l), &[10, 1]);
        assert!(tape.value(l).is_finite());
        let l = enc.wo_logits(&mut tape, &store, &[(0, 3), (5, 0)]).unwrap();
        assert_eq!(tape.shape(l), &[2, 1]);
    }

    #[test]
    fn identical_embeddings_match_duplicated_row() {
        let (enc, mut store) = encoder(3);
        let row: Vec<f64> = store.get(enc.word_emb).row_slice(0).to_vec();
        store.get_mut(enc.word_emb).data_mut()[8..16].copy_from_slice(&row);
        let mut tape = Tape::eval();
        let l = enc.ww_logits(&mut tape, &store, &[(0, 1)]).unwrap();
        // Oracle: f1 on [w0, w0] evaluated by hand.
        let d = 8;
        let get = |id| store.get(id).data().to_vec();
        let (wl, wr, b, ow, ob) = (
            get(enc.ww_net.w_left),
            get(enc.ww_net.w_right),
            get(enc.ww_net.bias),
            get(enc.ww_net.out_w),
            get(enc.ww_net.out_b),
        );
        let mut out = ob[0];
        for h in 0..d {
            let mut s = b[h];
            for k in 0..d {
                s += row[k] * wl[k * d + h] + row[k] * wr[k * d + h];
            }
            out += s.max(0.0) * ow[h];
        }
        assert!((tape.value(l).item() - out).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_word_is_an_error() {
        let (enc, store) = encoder(5);
        let mut tape = Tape::eval();
        assert!(matches!(
            enc.ww_logits(&mut tape, &store, &[(0, 5)]),
            Err(KnowledgeError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            enc.wo_logits(&mut tape, &store, &[(0, 4)]),
            Err(KnowledgeError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn untrained_posterior_sits_near_base_rate() {
        let (enc, store) = encoder(6);
        let post = enc.posterior(&store).unwrap();
        let mean: f64 = post.ww_edges().iter().map(|e| e.1).sum::<f64>() / 15.0;
        assert!((mean - 0.1).abs() < 0.1, "{mean}");
        assert_eq!(post.wo_edges().len(), 24);
    }

    #[test]
    fn logits_gradcheck() {
        let (enc, store) = encoder(5);
        let err = finite_difference_check(
            |tape, s| {
                let a = enc.ww_logits(tape, s, &[(0, 1), (2, 4), (3, 1)])?;
                let b = enc.wo_logits(tape, s, &[(0, 1), (4, 3)])?;
                let a = tape.tanh(a)?;
                let sa = tape.sum(a)?;
                let sb = tape.sum(b)?;
                Ok::<_, KnowledgeError>(tape.mul(sa, sb)?)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
