use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, TensorError, Var};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function of `params` with
/// central differences over every coordinate. Returns the max relative
/// error, using `max(1, |analytic|, |numeric|)` as the denominator.
///
/// The function is re-run on a fresh training-mode tape for every probe and
/// must be deterministic; a function that applies a dropout mask is rejected.
pub fn finite_difference_check<F, E>(mut f: F, params: &ParamStore, eps: f64) -> Result<f64, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid(format!("finite-difference step {eps} must be positive")).into());
    }
    let mut tape = Tape::training();
    let out = f(&mut tape, params)?;
    if tape.is_stochastic() {
        return Err(TensorError::Stochastic.into());
    }
    let analytic = tape.backward(out, params)?;

    let mut probe = params.clone();
    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::training();
        let out = f(&mut tape, store)?;
        if tape.is_stochastic() {
            return Err(TensorError::Stochastic.into());
        }
        Ok(tape.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
/// Every differentiable primitive, composed with a fixed random projection so
/// the upstream gradient is not uniform. Returns the max relative error of each.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    type Build = fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>;
    fn x(t: &mut Tape, s: &ParamStore) -> Result<Var, TensorError> {
        t.param(s, s.id_of("x").expect("registered"))
    }
    fn y(t: &mut Tape, s: &ParamStore) -> Result<Var, TensorError> {
        t.param(s, s.id_of("y").expect("registered"))
    }
    fn p(t: &mut Tape, s: &ParamStore) -> Result<Var, TensorError> {
        t.param(s, s.id_of("pos").expect("registered"))
    }
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |t, s| {
            let a = x(t, s)?;
            let b = y(t, s)?;
            let bt = t.transpose(b)?;
            t.matmul(a, bt)
        }),
        ("add", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            t.add(a, b)
        }),
        ("add_row_broadcast", |t, s| {
            let a = x(t, s)?;
            let r = t.param(s, s.id_of("row").expect("registered"))?;
            t.add(a, r)
        }),
        ("sub", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            t.sub(a, b)
        }),
        ("mul", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            t.mul(a, b)
        }),
        ("mul_row_broadcast", |t, s| {
            let a = x(t, s)?;
            let r = t.param(s, s.id_of("row").expect("registered"))?;
            t.mul(a, r)
        }),
        ("mul_scalar_broadcast", |t, s| {
            let a = x(t, s)?;
            let c = t.param(s, s.id_of("scalar").expect("registered"))?;
            t.mul(a, c)
        }),
        ("affine", |t, s| {
            let a = x(t, s)?;
            t.affine(a, -1.7, 0.3)
        }),
        ("sigmoid", |t, s| {
            let a = x(t, s)?;
            t.sigmoid(a)
        }),
        ("tanh", |t, s| {
            let a = x(t, s)?;
            t.tanh(a)
        }),
        ("relu", |t, s| {
            let a = x(t, s)?;
            t.relu(a)
        }),
        ("exp", |t, s| {
            let a = x(t, s)?;
            t.exp(a)
        }),
        ("log", |t, s| {
            let a = p(t, s)?;
            t.log(a)
        }),
        ("clamp", |t, s| {
            let a = x(t, s)?;
            t.clamp(a, -0.5, 0.5)
        }),
        ("softmax", |t, s| {
            let a = x(t, s)?;
            t.softmax_rows(a)
        }),
        ("log_softmax", |t, s| {
            let a = x(t, s)?;
            t.log_softmax_rows(a)
        }),
        ("layer_norm", |t, s| {
            let a = x(t, s)?;
            let g = t.param(s, s.id_of("row").expect("registered"))?;
            let b = t.param(s, s.id_of("row2").expect("registered"))?;
            t.layer_norm(a, g, b)
        }),
        ("concat", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            let c = t.concat(&[a, b, a])?;
            t.tanh(c)
        }),
        ("gather", |t, s| {
            let a = x(t, s)?;
            t.gather(a, vec![0, 5, 5, 11, 2, 7, 0, 1], vec![2, 4])
        }),
        ("embedding_rows", |t, s| {
            let a = x(t, s)?;
            t.rows(a, &[2, 0, 2, 1])
        }),
        ("mean", |t, s| {
            let a = x(t, s)?;
            let sq = t.mul(a, a)?;
            t.mean(sq)
        }),
        ("row_normalize", |t, s| {
            let a = p(t, s)?;
            t.row_normalize(a)
        }),
        ("transpose", |t, s| {
            let a = x(t, s)?;
            t.transpose(a)
        }),
        ("add_col_broadcast", |t, s| {
            let a = x(t, s)?;
            let c = t.param(s, s.id_of("col").expect("registered"))?;
            t.add(a, c)
        }),
        ("mul_col_broadcast", |t, s| {
            let a = x(t, s)?;
            let c = t.param(s, s.id_of("col").expect("registered"))?;
            t.mul(a, c)
        }),
        ("reshape", |t, s| {
            let a = x(t, s)?;
            let r = t.reshape(a, vec![2, 6])?;
            t.softmax_rows(r)
        }),
        ("vstack", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            let v = t.vstack(&[a, b, a])?;
            t.tanh(v)
        }),
        ("block_matmul", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            let a = t.reshape(a, vec![6, 2])?;
            let b = t.reshape(b, vec![6, 2])?;
            t.block_matmul(a, b, 3)
        }),
        ("gru_gate", |t, s| {
            let (a, b) = (x(t, s)?, y(t, s)?);
            let xin = t.concat(&[a, b, a])?;
            let bs = t.scale(b, 0.7)?;
            let hp = t.concat(&[bs, a, b])?;
            let h = t.tanh(b)?;
            t.gru_gate(xin, hp, h, &[1.0, 0.0, 1.0])
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, build) in cases {
        let st = store_with(&[
            ("x", random(3, 4, &mut rng)),
            ("y", random(3, 4, &mut rng)),
            ("pos", positive(3, 4, &mut rng)),
            ("row", random(1, 4, &mut rng)),
            ("row2", random(1, 4, &mut rng)),
            ("scalar", random(1, 1, &mut rng)),
            ("col", random(3, 1, &mut rng)),
        ]);
        let proj_seed: u64 = rng.random();
        let err = finite_difference_check(
            |tape, s| {
                let out = build(tape, s)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                let n = tape.value(out).len();
                let w: Vec<f64> = (0..n).map(|_| prng.random_range(-1.0..1.0)).collect();
                let shape = tape.shape(out).to_vec();
                let wv = tape.constant(Tensor::new(shape, w)?)?;
                let weighted = tape.mul(out, wv)?;
                tape.sum(weighted)
            },
            &st,
            DEFAULT_FD_EPS,
        )?;
        out.push((name, err));
    }
    Ok(out)
}

fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.add(*name, t.clone());
    }
    s
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}
