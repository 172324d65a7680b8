//! Edge posterior, relaxed edge sampling, the sparse Bernoulli prior, and
//! ranking of learned edges.

mod encoder;
mod prior;
mod rank;

pub use encoder::{KnowledgeEncoder, KnowledgePosterior, PairNet};
pub use prior::{build_prior, kl_bernoulli, kl_to_prior, KnowledgePrior, DEFAULT_BASE_PROB, DEFAULT_KNOWN_PROB, PROB_CLAMP};
pub use rank::{export_json, precision_at_k, rank_edges, KgExport, RankedWo, RankedWw};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{sigmoid, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{what} index {index} out of range for {len} entries")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("no edges given")]
    Empty,
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Noise used by the relaxed edge sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relaxation {
    /// `log U − log(1 − U)`: the binary-concrete relaxation.
    #[default]
    Logistic,
    /// A single Gumbel draw `−log(−log U)`.
    Gumbel,
}

impl Relaxation {
    pub fn noise<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        // Uniform on the open interval (0, 1).
        let u = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        match self {
            Relaxation::Logistic => u.ln() - (-u).ln_1p(),
            Relaxation::Gumbel => -(-u.ln()).ln(),
        }
    }
}

pub fn edge_probability(logit: f64) -> f64 {
    sigmoid(logit)
}

/// `σ((logit + noise) / τ)` for a given noise draw.
pub fn relax_sample(logit: f64, tau: f64, noise: f64) -> Result<f64, KnowledgeError> {
    if !(tau > 0.0) {
        return Err(KnowledgeError::BadTemperature(tau));
    }
    Ok(sigmoid((logit + noise) / tau))
}

/// Relaxed samples for a column of logits, differentiable through `logits`.
pub fn relax_sample_var(tape: &mut Tape, logits: Var, tau: f64, noise: &[f64]) -> Result<Var, KnowledgeError> {
    if !(tau > 0.0) {
        return Err(KnowledgeError::BadTemperature(tau));
    }
    let shape = tape.shape(logits).to_vec();
    let n = tape.constant(Tensor::new(shape, noise.to_vec())?)?;
    let s = tape.add(logits, n)?;
    let s = tape.scale(s, 1.0 / tau)?;
    Ok(tape.sigmoid(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probability_examples() {
        assert_eq!(edge_probability(0.0), 0.5);
        // Oracle: 1 − σ(30) = 1/(1 + e^30) ≈ e^-30.
        let tail = 1.0 / (1.0 + 30f64.exp());
        assert!((1.0 - edge_probability(30.0) - tail).abs() < 1e-15);
        assert!(edge_probability(30.0) < 1.0);
        assert!(edge_probability(-0.1) < edge_probability(0.1));
        assert!(edge_probability(-800.0) >= 0.0 && edge_probability(800.0) <= 1.0);
    }

    #[test]
    fn relax_examples() {
        assert_eq!(relax_sample(0.0, 0.37, 0.0).unwrap(), 0.5);
        let v = relax_sample(2.0, 0.1, 0.0).unwrap();
        let tail = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!((1.0 - v - tail).abs() < 1e-15, "{v}");
        assert!(matches!(relax_sample(0.0, 0.0, 0.0), Err(KnowledgeError::BadTemperature(_))));
        assert!(relax_sample(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn monte_carlo_hard_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for logit in [-1.5, 0.0, 0.8] {
            let hits = (0..100_000)
                .filter(|_| relax_sample(logit, 0.1, Relaxation::Logistic.noise(&mut rng)).unwrap() > 0.5)
                .count();
            let rate = hits as f64 / 100_000.0;
            assert!((rate - edge_probability(logit)).abs() < 0.01, "{logit}: {rate}");
        }
    }

    #[test]
    fn samples_stay_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for flavor in [Relaxation::Logistic, Relaxation::Gumbel] {
            for _ in 0..10_000 {
                let v = relax_sample(0.3, 0.5, flavor.noise(&mut rng)).unwrap();
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn lower_temperature_concentrates_near_binary_values() {
        let spread = |tau: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let n = 10_000;
            (0..n)
                .map(|_| {
                    let v = relax_sample(0.4, tau, Relaxation::Logistic.noise(&mut rng)).unwrap();
                    let d = v.min(1.0 - v);
                    d * d
                })
                .sum::<f64>()
                / n as f64
        };
        let taus = [0.5, 0.4, 0.3, 0.2, 0.1];
        let s: Vec<f64> = taus.iter().map(|&t| spread(t)).collect();
        for w in s.windows(2) {
            assert!(w[1] < w[0], "{s:?}");
        }
    }

    #[test]
    fn relaxed_sample_gradient_at_fixed_noise() {
        let mut store = ParamStore::new();
        store.add("logits", Tensor::matrix(4, 1, vec![-1.0, 0.2, 1.3, 2.5]).unwrap());
        let noise = [0.3, -0.7, 0.05, -2.0];
        let err = finite_difference_check(
            |tape, s| {
                let l = tape.param(s, s.id_of("logits").unwrap())?;
                let v = relax_sample_var(tape, l, 0.3, &noise)?;
                let v = tape.mul(v, v)?;
                Ok::<_, KnowledgeError>(tape.sum(v)?)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gumbel_flag_gives_different_noise() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_ne!(Relaxation::Logistic.noise(&mut a), Relaxation::Gumbel.noise(&mut b));
    }
}
