use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::KnowledgePosterior;
use crate::corpus::Vocabulary;

/// Sorts edges by descending probability, ties by ascending edge key, after
/// dropping excluded edges.
pub fn rank_edges<E: Ord + Hash + Copy>(edges: &[(E, f64)], exclude: &HashSet<E>) -> Vec<(E, f64)> {
    let mut kept: Vec<(E, f64)> = edges.iter().filter(|(e, _)| !exclude.contains(e)).copied().collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept
}

/// Fraction of the first `k` ranked edges that are true. When fewer than `k`
/// candidates exist, all are used and the divisor is their count; an empty
/// ranking or `k = 0` scores 0.
pub fn precision_at_k<E: Eq + Hash>(ranking: &[E], truth: &HashSet<E>, k: usize) -> f64 {
    let used = k.min(ranking.len());
    if used == 0 {
        return 0.0;
    }
    let hits = ranking[..used].iter().filter(|e| truth.contains(e)).count();
    hits as f64 / used as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedWw {
    pub i: String,
    pub j: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedWo {
    pub i: String,
    pub c: String,
    pub prob: f64,
}

/// Ranked knowledge graph as written by `extract-kg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgExport {
    pub ww: Vec<RankedWw>,
    pub wo: Vec<RankedWo>,
}

/// Both edge kinds in rank order, words spelled out. `limit` caps each list.
pub fn export_json(posterior: &KnowledgePosterior, vocab: &Vocabulary, limit: Option<usize>) -> KgExport {
    let cap = limit.unwrap_or(usize::MAX);
    let ww = rank_edges(&posterior.ww_edges(), &HashSet::new())
        .into_iter()
        .take(cap)
        .map(|((i, j), prob)| RankedWw {
            i: vocab.word(i).to_string(),
            j: vocab.word(j).to_string(),
            prob,
        })
        .collect();
    let wo = rank_edges(&posterior.wo_edges(), &HashSet::new())
        .into_iter()
        .take(cap)
        .map(|((i, c), prob)| RankedWo {
            i: vocab.word(i).to_string(),
            c: vocab.symbols.operators[c].token().to_string(),
            prob,
        })
        .collect();
    KgExport { ww, wo }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Symbols;
    use crate::diff::Tensor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_break_on_smaller_key() {
        let edges = [((0, 1), 0.9), ((0, 2), 0.2), ((1, 2), 0.9)];
        let order: Vec<_> = rank_edges(&edges, &HashSet::new()).into_iter().map(|e| e.0).collect();
        assert_eq!(order, vec![(0, 1), (1, 2), (0, 2)]);
        let order: Vec<_> = rank_edges(&edges, &HashSet::from([(0, 1)])).into_iter().map(|e| e.0).collect();
        assert_eq!(order, vec![(1, 2), (0, 2)]);
        assert!(rank_edges::<(usize, usize)>(&[], &HashSet::new()).is_empty());
    }

    #[test]
    fn precision_examples() {
        let truth: HashSet<u32> = HashSet::from([1, 2, 3]);
        assert_eq!(precision_at_k(&[1, 2, 3, 4], &truth, 3), 1.0);
        assert_eq!(precision_at_k(&[7, 8, 1], &truth, 2), 0.0);
        assert_eq!(precision_at_k(&[1, 9], &truth, 10), 0.5);
        assert_eq!(precision_at_k::<u32>(&[], &truth, 5), 0.0);
    }

    #[test]
    fn random_ranking_scores_edge_density() {
        let pool: Vec<u32> = (0..200).collect();
        let truth: HashSet<u32> = (0..30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        for _ in 0..1000 {
            let mut r = pool.clone();
            r.shuffle(&mut rng);
            total += precision_at_k(&r, &truth, 20);
        }
        let mean = total / 1000.0;
        // Density 30/200 = 0.15; the standard error of the mean is about 0.0025.
        assert!((mean - 0.15).abs() < 0.01, "{mean}");
    }

    #[test]
    fn export_lists_each_pair_once_in_rank_order() {
        let vocab = Vocabulary::from_words(
            vec!["a".into(), "b".into(), "c".into()],
            vec![5, 5, 5],
            1,
            8,
            Symbols::default(),
        );
        let ww = Tensor::matrix(3, 3, vec![0.0, 2.0, -1.0, 2.0, 0.0, 3.0, -1.0, 3.0, 0.0]).unwrap();
        let wo = Tensor::zeros(&[3, 4]);
        let post = KnowledgePosterior {
            ww_logits: ww,
            wo_logits: wo,
        };
        let kg = export_json(&post, &vocab, None);
        let pairs: Vec<(&str, &str)> = kg.ww.iter().map(|e| (e.i.as_str(), e.j.as_str())).collect();
        assert_eq!(pairs, vec![("b", "c"), ("a", "b"), ("a", "c")]);
        assert_eq!(kg.wo.len(), 12);
        let json = serde_json::to_value(&kg).unwrap();
        assert!(json["ww"][0].get("prob").is_some());
        assert!(json["wo"][0].get("c").is_some());
    }
}
