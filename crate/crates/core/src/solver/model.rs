use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{edge_values, EdgeRef, EdgeSource, EdgeValues};
use super::params::{Gru, Linear, Norm, SolverParams};
use super::{Backbone, Batch, ModelConfig, SolverError};
use crate::corpus::Vocabulary;
use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::knowledge::KnowledgeEncoder;
use crate::rng::{stream, Stream};

/// Additive logit for excluded positions; `exp` of it underflows to 0.
const MASKED: f64 = -1e9;

/// Where adjacency entries come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Knowledge encoder posterior (sampled while training).
    Learned,
    /// Binary edges from fixed sets; empty sets leave only self-loops.
    Fixed {
        ww: BTreeSet<(usize, usize)>,
        wo: BTreeSet<(usize, usize)>,
    },
}

impl EdgeMode {
    pub fn none() -> Self {
        EdgeMode::Fixed {
            ww: BTreeSet::new(),
            wo: BTreeSet::new(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, EdgeMode::Learned)
    }

    fn fixed_value(&self, e: EdgeRef) -> f64 {
        let hit = match (self, e) {
            (EdgeMode::Fixed { ww, .. }, EdgeRef::Ww(i, j)) => ww.contains(&(i.min(j), i.max(j))),
            (EdgeMode::Fixed { wo, .. }, EdgeRef::Wo(i, c)) => wo.contains(&(i, c)),
            (EdgeMode::Learned, _) => false,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub edge_mode: EdgeMode,
    pub knowledge: KnowledgeEncoder,
    pub solver: SolverParams,
}

/// Encoder output for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Word features, `[B * n, d]`, zero on padding.
    pub h: Var,
    /// Initial decoder state, `[B, d]`.
    pub s1: Var,
}

/// Scores of one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B, V]`, with unavailable slots pushed to `-1e9`.
    pub logits: Var,
    /// Attention over words, `[B, n]`.
    pub weights: Var,
    /// Attended context, `[B, d]`.
    pub context: Var,
    /// Candidate embedding table the step scored against.
    pub table: Var,
}

/// Per-batch quantities shared by every decoding step.
pub(super) struct Context {
    pub h: Var,
    pub s1: Var,
    ae: Var,
    ad: Var,
    att_h: Var,
    re_h: Option<Var>,
    ops: Var,
    ops_mix: Option<Var>,
    att_mask: Var,
    cand_mask: Var,
    statics: Option<Var>,
    /// Row of `table` for each `(problem, candidate)`.
    cand_rows: Vec<usize>,
    word_problem: Vec<usize>,
    cand_problem: Vec<usize>,
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, l: &Linear) -> Result<Var, SolverError> {
    let w = tape.param(store, l.w)?;
    let b = tape.param(store, l.b)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, n: &Norm) -> Result<Var, SolverError> {
    let g = tape.param(store, n.gain)?;
    let b = tape.param(store, n.bias)?;
    Ok(tape.layer_norm(x, g, b)?)
}

fn project(tape: &mut Tape, store: &ParamStore, x: Var, w: crate::diff::ParamId) -> Result<Var, SolverError> {
    let w = tape.param(store, w)?;
    Ok(tape.matmul(x, w)?)
}

/// Problem index of every row when `blocks` problems each own `per` rows.
fn owners(blocks: usize, per: usize) -> Vec<usize> {
    (0..blocks).flat_map(|b| std::iter::repeat_n(b, per)).collect()
}

impl Model {
    /// Builds a model with fresh parameters drawn from the seed's init
    /// stream. Every variant allocates the same parameters in the same
    /// order, so variants sharing a seed share their initial values.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        edge_mode: EdgeMode,
        edge_init_prob: f64,
        seed: u64,
    ) -> (Self, ParamStore) {
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let symbols = &vocab.symbols;
        let knowledge = KnowledgeEncoder::new(
            &mut store,
            vocab.num_words(),
            symbols.num_operators(),
            config.dim,
            edge_init_prob,
            &mut rng,
        );
        let solver = SolverParams::new(
            &mut store,
            &config,
            vocab.num_embedding_rows(),
            symbols.num_operators(),
            symbols.constants.len(),
            &mut rng,
        );
        (
            Self {
                config,
                vocab,
                edge_mode,
                knowledge,
                solver,
            },
            store,
        )
    }

    pub fn batch(&self, problems: &[&crate::corpus::Problem], with_targets: bool) -> Result<Batch, SolverError> {
        Batch::new(problems, &self.vocab, with_targets)
    }

    /// Edge values for evaluation: posterior probabilities, or the fixed sets.
    pub fn eval_edges(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<EdgeValues, SolverError> {
        match &self.edge_mode {
            EdgeMode::Learned => edge_values(tape, store, &self.knowledge, &batch.edges, EdgeSource::Expected),
            mode => {
                let f = |e: EdgeRef| mode.fixed_value(e);
                edge_values(tape, store, &self.knowledge, &batch.edges, EdgeSource::Fixed(&f))
            }
        }
    }

    /// Edge values for a training step: one relaxed sample per edge, or the
    /// fixed sets.
    pub fn train_edges(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        tau: f64,
        relaxation: crate::knowledge::Relaxation,
        rng: &mut ChaCha8Rng,
    ) -> Result<EdgeValues, SolverError> {
        match &self.edge_mode {
            EdgeMode::Learned => edge_values(
                tape,
                store,
                &self.knowledge,
                &batch.edges,
                EdgeSource::Relaxed { tau, relaxation, rng },
            ),
            _ => self.eval_edges(tape, store, batch),
        }
    }

    /// Row-normalized `A_E + I` (`[B * n, n]`) and `A_D` (`[B * C, n]`).
    pub fn adjacency(&self, tape: &mut Tape, batch: &Batch, values: Var) -> Result<(Var, Var), SolverError> {
        let n = batch.width;
        let ae = tape.gather(values, batch.ae_index.clone(), vec![batch.size * n, n])?;
        let ae = tape.row_normalize(ae)?;
        let ad = tape.gather(values, batch.ad_index.clone(), vec![batch.size * batch.num_operators, n])?;
        let ad = tape.row_normalize(ad)?;
        Ok((ae, ad))
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded, SolverError> {
        let (bsz, n, d) = (batch.size, batch.width, self.config.dim);
        let table = tape.param(store, self.solver.token_emb)?;
        let mut x = tape.rows(table, &batch.token_rows)?;
        if let Some(rng) = dropout {
            x = tape.dropout(x, self.config.dropout, rng)?;
        }
        let mask_col = tape.constant(Tensor::matrix(bsz * n, 1, batch.mask.clone())?)?;
        let mean_weights: Vec<f64> = (0..bsz)
            .flat_map(|b| {
                let len = batch.lengths[b] as f64;
                batch.mask[b * n..(b + 1) * n].iter().map(move |m| m / len)
            })
            .collect();
        let mean_weights = tape.constant(Tensor::matrix(bsz, n, mean_weights)?)?;
        match self.config.backbone {
            Backbone::Birnn => {
                let fwd = self.solver.forward.as_ref().expect("recurrent backbone has forward cell");
                let bwd = self.solver.backward.as_ref().expect("recurrent backbone has backward cell");
                let (hf, last_f) = self.run_direction(tape, store, batch, x, fwd, false)?;
                let (hb, last_b) = self.run_direction(tape, store, batch, x, bwd, true)?;
                let h = tape.add(hf, hb)?;
                let h = tape.mul(h, mask_col)?;
                let s1 = tape.add(last_f, last_b)?;
                debug_assert_eq!(tape.shape(h), [bsz * n, d]);
                Ok(Encoded { h, s1 })
            }
            Backbone::Pool => {
                let x = tape.mul(x, mask_col)?;
                let mean = tape.block_matmul(mean_weights, x, bsz)?;
                let spread = tape.rows(mean, &owners(bsz, n))?;
                let h = tape.add(x, spread)?;
                let h = tape.mul(h, mask_col)?;
                let s1 = tape.block_matmul(mean_weights, h, bsz)?;
                Ok(Encoded { h, s1 })
            }
        }
    }

    /// One recurrent pass over the padded batch. Returns outputs in
    /// problem-major order and the final state of every problem.
    fn run_direction(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        x: Var,
        cell: &Gru,
        reverse: bool,
    ) -> Result<(Var, Var), SolverError> {
        let (bsz, n, d) = (batch.size, batch.width, self.config.dim);
        let xp = linear(tape, store, x, &cell.input)?;
        let mut h = tape.constant(Tensor::zeros(&[bsz, d]))?;
        let mut outs = vec![h; n];
        let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in steps {
            let rows: Vec<usize> = (0..bsz).map(|b| b * n + t).collect();
            let mask: Vec<f64> = rows.iter().map(|&r| batch.mask[r]).collect();
            let xt = tape.rows(xp, &rows)?;
            let hp = linear(tape, store, h, &cell.state)?;
            h = tape.gru_gate(xt, hp, h, &mask)?;
            outs[t] = h;
        }
        // `outs` stacks time-major; reorder to problem-major.
        let stacked = tape.vstack(&outs)?;
        let order: Vec<usize> = (0..bsz).flat_map(|b| (0..n).map(move |t| t * bsz + b)).collect();
        Ok((tape.rows(stacked, &order)?, h))
    }

    /// Two graph-convolution layers over the row-normalized word graph:
    /// `Â · relu(Â · H · W1 + b1) · W2 + b2`.
    pub fn semantics_enhance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        ae: Var,
        blocks: usize,
    ) -> Result<Var, SolverError> {
        let p = self.solver.se1;
        let hw = project(tape, store, h, p.w)?;
        let m = tape.block_matmul(ae, hw, blocks)?;
        let b1 = tape.param(store, p.b)?;
        let m = tape.add(m, b1)?;
        let r = tape.relu(m)?;
        let m = tape.block_matmul(ae, r, blocks)?;
        linear(tape, store, m, &self.solver.se2)
    }

    /// Attention weights `[B, n]` of states `s` (`[B, d]`) over word features
    /// `h` (`[B * n, d]`). `pad` holds additive logits (`[B, n]`).
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        h: Var,
        pad: Option<Var>,
    ) -> Result<Var, SolverError> {
        let bsz = tape.shape(s)[0];
        let n = tape.shape(h)[0] / bsz;
        let att_h = project(tape, store, h, self.solver.att_word)?;
        self.attend_projected(tape, store, s, att_h, &owners(bsz, n), pad)
    }

    fn attend_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        att_h: Var,
        word_problem: &[usize],
        pad: Option<Var>,
    ) -> Result<Var, SolverError> {
        let bsz = tape.shape(s)[0];
        let n = word_problem.len() / bsz;
        let sp = project(tape, store, s, self.solver.att_state)?;
        let sp = tape.rows(sp, word_problem)?;
        let t = tape.add(sp, att_h)?;
        let t = tape.tanh(t)?;
        let l = project(tape, store, t, self.solver.att_v)?;
        let mut l = tape.reshape(l, vec![bsz, n])?;
        if let Some(pad) = pad {
            l = tape.add(l, pad)?;
        }
        Ok(tape.softmax_rows(l)?)
    }

    /// Operator representations after one step of state propagation through
    /// the word graph and the word-operator graph, `[B * C, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn reasoning_enhance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        weights: Var,
        h: Var,
        ae: Var,
        ad: Var,
    ) -> Result<Var, SolverError> {
        let bsz = tape.shape(s)[0];
        let n = tape.shape(weights)[1];
        let re_h = project(tape, store, h, self.solver.re1.parts[1])?;
        let ops = self.tiled_ops(tape, store, bsz)?;
        let mix = self.ops_mix(tape, store, bsz)?;
        self.reasoning_projected(tape, store, s, weights, re_h, ae, ad, ops, mix, &owners(bsz, n))
    }

    fn tiled_ops(&self, tape: &mut Tape, store: &ParamStore, bsz: usize) -> Result<Var, SolverError> {
        let c = self.vocab.symbols.num_operators();
        let table = tape.param(store, self.solver.op_emb)?;
        Ok(tape.rows(table, &(0..bsz).flat_map(|_| 0..c).collect::<Vec<_>>())?)
    }

    /// `O · W7_O + b7`, tiled over the batch.
    fn ops_mix(&self, tape: &mut Tape, store: &ParamStore, bsz: usize) -> Result<Var, SolverError> {
        let c = self.vocab.symbols.num_operators();
        let table = tape.param(store, self.solver.op_emb)?;
        let m = project(tape, store, table, self.solver.re4.parts[1])?;
        let b = tape.param(store, self.solver.re4.b)?;
        let m = tape.add(m, b)?;
        Ok(tape.rows(m, &(0..bsz).flat_map(|_| 0..c).collect::<Vec<_>>())?)
    }

    #[allow(clippy::too_many_arguments)]
    fn reasoning_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        weights: Var,
        re_h: Var,
        ae: Var,
        ad: Var,
        ops: Var,
        ops_mix: Var,
        word_problem: &[usize],
    ) -> Result<Var, SolverError> {
        let p = &self.solver;
        let bsz = tape.shape(s)[0];
        let rows = word_problem.len();
        // [w_i s, h_i] · W4 = w_i (s · W4_s) + h_i · W4_h
        let ws_col = tape.reshape(weights, vec![rows, 1])?;
        let sp = project(tape, store, s, p.re1.parts[0])?;
        let sp = tape.rows(sp, word_problem)?;
        let sp = tape.mul(sp, ws_col)?;
        let xw = tape.add(sp, re_h)?;
        let m = tape.block_matmul(ae, xw, bsz)?;
        let b4 = tape.param(store, p.re1.b)?;
        let m = tape.add(m, b4)?;
        let r = tape.relu(m)?;
        let m = tape.block_matmul(ae, r, bsz)?;
        let ht = linear(tape, store, m, &p.re2)?;
        let ln = norm(tape, store, ht, &p.re_norm_h)?;
        let hh = tape.add(ht, ln)?;
        let m = project(tape, store, hh, p.re3.w)?;
        let m = tape.block_matmul(ad, m, bsz)?;
        let b6 = tape.param(store, p.re3.b)?;
        let m = tape.add(m, b6)?;
        let m = tape.relu(m)?;
        let ot = norm(tape, store, m, &p.re_norm_o)?;
        let m = project(tape, store, ot, p.re4.parts[0])?;
        let m = tape.add(m, ops_mix)?;
        let oh = tape.relu(m)?;
        let ln = norm(tape, store, oh, &p.re_norm_out)?;
        Ok(tape.add(ops, ln)?)
    }

    /// Gated recurrent update with input `[e(y), c]`. Rows with `active`
    /// equal to 0 keep their state.
    pub fn advance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        symbol_emb: Var,
        context: Var,
        active: &[f64],
    ) -> Result<Var, SolverError> {
        let cell = &self.solver.decoder;
        let x = tape.concat(&[symbol_emb, context])?;
        let xp = linear(tape, store, x, &cell.input)?;
        let hp = linear(tape, store, s, &cell.state)?;
        Ok(tape.gru_gate(xp, hp, s, active)?)
    }

    pub(super) fn prepare(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        edges: &EdgeValues,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Context, SolverError> {
        let (bsz, n) = (batch.size, batch.width);
        let c = batch.num_operators;
        let k = batch.num_constants;
        let ms = batch.max_slots;
        let v = batch.num_candidates();
        let enc = self.encode(tape, store, batch, dropout)?;
        let (ae, ad) = self.adjacency(tape, batch, edges.values)?;
        let h = if self.config.use_se {
            let h = self.semantics_enhance(tape, store, enc.h, ae, bsz)?;
            let mask_col = tape.constant(Tensor::matrix(bsz * n, 1, batch.mask.clone())?)?;
            tape.mul(h, mask_col)?
        } else {
            enc.h
        };
        let att_h = project(tape, store, h, self.solver.att_word)?;
        let (re_h, ops_mix) = if self.config.use_re {
            (
                Some(project(tape, store, h, self.solver.re1.parts[1])?),
                Some(self.ops_mix(tape, store, bsz)?),
            )
        } else {
            (None, None)
        };
        let ops = self.tiled_ops(tape, store, bsz)?;

        let mut statics = Vec::new();
        if k > 0 {
            let table = tape.param(store, self.solver.const_emb)?;
            statics.push(tape.rows(table, &(0..k).collect::<Vec<_>>())?);
        }
        if ms > 0 {
            let rows: Vec<usize> = (0..bsz)
                .flat_map(|b| (0..ms).map(move |j| (b, j)))
                .map(|(b, j)| batch.slot_positions[b].get(j).map_or(0, |&t| b * n + t))
                .collect();
            statics.push(tape.rows(h, &rows)?);
        }
        let statics = match statics.len() {
            0 => None,
            1 => Some(statics[0]),
            _ => Some(tape.vstack(&statics)?),
        };

        let mut cand_rows = Vec::with_capacity(bsz * v);
        let mut cand_mask = Vec::with_capacity(bsz * v);
        for b in 0..bsz {
            for cand in 0..v {
                let (row, ok) = if cand < c {
                    (b * c + cand, true)
                } else if cand < c + k {
                    (bsz * c + cand - c, true)
                } else {
                    let j = cand - c - k;
                    (bsz * c + k + b * ms + j, j < batch.num_slots(b))
                };
                cand_rows.push(if ok { row } else { 0 });
                cand_mask.push(if ok { 0.0 } else { MASKED });
            }
        }
        let att_mask: Vec<f64> = batch.mask.iter().map(|&m| if m > 0.0 { 0.0 } else { MASKED }).collect();
        Ok(Context {
            h,
            s1: enc.s1,
            ae,
            ad,
            att_h,
            re_h,
            ops,
            ops_mix,
            att_mask: tape.constant(Tensor::matrix(bsz, n, att_mask)?)?,
            cand_mask: tape.constant(Tensor::matrix(bsz, v, cand_mask)?)?,
            statics,
            cand_rows,
            word_problem: owners(bsz, n),
            cand_problem: owners(bsz, v),
        })
    }

    /// Scores every candidate at state `s`.
    pub(super) fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        ctx: &Context,
        s: Var,
    ) -> Result<StepOutput, SolverError> {
        let bsz = batch.size;
        let v = batch.num_candidates();
        let weights = self.attend_projected(tape, store, s, ctx.att_h, &ctx.word_problem, Some(ctx.att_mask))?;
        let context = tape.block_matmul(weights, ctx.h, bsz)?;
        let ops = match (ctx.re_h, ctx.ops_mix) {
            (Some(re_h), Some(mix)) => self.reasoning_projected(
                tape,
                store,
                s,
                weights,
                re_h,
                ctx.ae,
                ctx.ad,
                ctx.ops,
                mix,
                &ctx.word_problem,
            )?,
            _ => ctx.ops,
        };
        let table = match ctx.statics {
            Some(st) => tape.vstack(&[ops, st])?,
            None => ops,
        };
        let sc = &self.solver.score;
        let proj = project(tape, store, table, sc.parts[2])?;
        let cand = tape.rows(proj, &ctx.cand_rows)?;
        let qs = project(tape, store, s, sc.parts[0])?;
        let qc = project(tape, store, context, sc.parts[1])?;
        let q = tape.add(qs, qc)?;
        let b = tape.param(store, sc.b)?;
        let q = tape.add(q, b)?;
        let q = tape.rows(q, &ctx.cand_problem)?;
        let t = tape.add(q, cand)?;
        let t = tape.tanh(t)?;
        let l = project(tape, store, t, self.solver.score_u)?;
        let l = tape.reshape(l, vec![bsz, v])?;
        let logits = tape.add(l, ctx.cand_mask)?;
        Ok(StepOutput {
            logits,
            weights,
            context,
            table,
        })
    }

    /// Feeds one chosen candidate per problem back into the decoder state.
    pub(super) fn feed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        ctx: &Context,
        out: &StepOutput,
        s: Var,
        choices: &[usize],
        active: &[f64],
    ) -> Result<Var, SolverError> {
        let v = batch.num_candidates();
        let rows: Vec<usize> = choices.iter().enumerate().map(|(b, &y)| ctx.cand_rows[b * v + y]).collect();
        let e = tape.rows(out.table, &rows)?;
        self.advance(tape, store, s, e, out.context, active)
    }

    /// Teacher-forced negative log-likelihood of the gold prefixes, summed
    /// over the batch.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        edges: &EdgeValues,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, SolverError> {
        Ok(self.teacher_forced(tape, store, batch, edges, dropout)?.0)
    }

    /// Negative log-likelihood of each problem's gold prefix.
    pub fn problem_nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        edges: &EdgeValues,
    ) -> Result<Vec<f64>, SolverError> {
        Ok(self.teacher_forced(tape, store, batch, edges, None)?.1)
    }

    fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        edges: &EdgeValues,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<f64>), SolverError> {
        if batch.targets.len() != batch.size {
            return Err(SolverError::BadTarget("batch".into(), "built without targets".into()));
        }
        let ctx = self.prepare(tape, store, batch, edges, dropout)?;
        let v = batch.num_candidates();
        let mut s = ctx.s1;
        let mut picked = Vec::new();
        let mut each = vec![0.0; batch.size];
        for t in 0..batch.max_target_len() {
            let out = self.step(tape, store, batch, &ctx, s)?;
            let logp = tape.log_softmax_rows(out.logits)?;
            let mut index = Vec::new();
            let mut choices = Vec::with_capacity(batch.size);
            let mut active = Vec::with_capacity(batch.size);
            for (b, target) in batch.targets.iter().enumerate() {
                match target.get(t) {
                    Some(&y) => {
                        index.push(b * v + y);
                        each[b] -= tape.value(logp).data()[b * v + y];
                        choices.push(y);
                        active.push(1.0);
                    }
                    None => {
                        choices.push(0);
                        active.push(0.0);
                    }
                }
            }
            let m = index.len();
            picked.push(tape.gather(logp, index, vec![m, 1])?);
            if t + 1 < batch.max_target_len() {
                s = self.feed(tape, store, batch, &ctx, &out, s, &choices, &active)?;
            }
        }
        let all = if picked.len() == 1 { picked[0] } else { tape.vstack(&picked)? };
        let total = tape.sum(all)?;
        Ok((tape.scale(total, -1.0)?, each))
    }
}
