use rand::Rng;

use super::{Backbone, ModelConfig};
use crate::diff::{init_normal, init_uniform, ParamId, ParamStore, Tensor};

/// A `[fan_in, fan_out]` weight and its `[1, fan_out]` bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_uniform(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }
}

/// Input and state projections of a gated recurrent cell (`3d` columns in
/// reset, update, candidate order).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gru {
    pub input: Linear,
    pub state: Linear,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * d, rng),
            state: Linear::new(store, &format!("{name}.state"), d, 3 * d, rng),
        }
    }
}

/// Weight matrices split by the blocks of a concatenated input, so
/// `[x, y] · W` is computed as `x · W_x + y · W_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitLinear {
    pub parts: Vec<ParamId>,
    pub b: ParamId,
}

impl SplitLinear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], fan_out: usize, rng: &mut R) -> Self {
        let fan_in: usize = widths.iter().sum();
        let full = init_uniform(fan_in, fan_out, rng);
        let mut offset = 0;
        let parts = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let data = full.data()[offset * fan_out..(offset + w) * fan_out].to_vec();
                offset += w;
                store.add(format!("{name}.w{k}"), Tensor::matrix(w, fan_out, data).unwrap())
            })
            .collect();
        Self {
            parts,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    /// Token embeddings: PAD, UNK, slots, then words.
    pub token_emb: ParamId,
    pub op_emb: ParamId,
    pub const_emb: ParamId,
    pub forward: Option<Gru>,
    pub backward: Option<Gru>,
    pub se1: Linear,
    pub se2: Linear,
    /// Attention `vᵀ tanh(W3 [s, h])`: state part, word part, `v`.
    pub att_state: ParamId,
    pub att_word: ParamId,
    pub att_v: ParamId,
    /// Reasoning-enhanced module.
    pub re1: SplitLinear,
    pub re2: Linear,
    pub re_norm_h: Norm,
    pub re3: Linear,
    pub re_norm_o: Norm,
    pub re4: SplitLinear,
    pub re_norm_out: Norm,
    /// Output head `uᵀ tanh(W_s [s, c, e])`.
    pub score: SplitLinear,
    pub score_u: ParamId,
    pub decoder: Gru,
}

impl SolverParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &ModelConfig,
        embedding_rows: usize,
        num_operators: usize,
        num_constants: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let token_emb = store.add("solver.token_emb", init_normal(embedding_rows, d, config.init_std, rng));
        let op_emb = store.add("solver.op_emb", init_normal(num_operators, d, config.init_std, rng));
        let const_emb = store.add("solver.const_emb", init_normal(num_constants.max(1), d, config.init_std, rng));
        let (forward, backward) = match config.backbone {
            Backbone::Birnn => (
                Some(Gru::new(store, "solver.enc_fwd", d, d, rng)),
                Some(Gru::new(store, "solver.enc_bwd", d, d, rng)),
            ),
            Backbone::Pool => (None, None),
        };
        Self {
            token_emb,
            op_emb,
            const_emb,
            forward,
            backward,
            se1: Linear::new(store, "solver.se1", d, d, rng),
            se2: Linear::new(store, "solver.se2", d, d, rng),
            att_state: half_of_concat(store, "solver.att.w_state", d, rng),
            att_word: half_of_concat(store, "solver.att.w_word", d, rng),
            att_v: store.add("solver.att.v", init_uniform(d, 1, rng)),
            re1: SplitLinear::new(store, "solver.re1", &[d, d], d, rng),
            re2: Linear::new(store, "solver.re2", d, d, rng),
            re_norm_h: Norm::new(store, "solver.re_norm_h", d),
            re3: Linear::new(store, "solver.re3", d, d, rng),
            re_norm_o: Norm::new(store, "solver.re_norm_o", d),
            re4: SplitLinear::new(store, "solver.re4", &[d, d], d, rng),
            re_norm_out: Norm::new(store, "solver.re_norm_out", d),
            score: SplitLinear::new(store, "solver.score", &[d, d, d], d, rng),
            score_u: store.add("solver.score.u", init_uniform(d, 1, rng)),
            decoder: Gru::new(store, "solver.dec", 2 * d, d, rng),
        }
    }
}

/// A d×d block of a weight whose input is a 2d-wide concatenation.
fn half_of_concat<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> ParamId {
    let full = init_uniform(2 * d, d, rng);
    store.add(name, Tensor::matrix(d, d, full.data()[..d * d].to_vec()).unwrap())
}
