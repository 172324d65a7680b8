use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.add(*name, t.clone());
    }
    s
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn forward_examples() {
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::row(vec![0.0])).unwrap();
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);

    let z = tape.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
    let p = tape.softmax_rows(z).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let c = tape.constant(Tensor::row(vec![3.0, 3.0, 3.0])).unwrap();
    let gain = tape.constant(Tensor::row(vec![1.0; 3])).unwrap();
    let bias = tape.constant(Tensor::row(vec![0.0; 3])).unwrap();
    let ln = tape.layer_norm(c, gain, bias).unwrap();
    assert_eq!(tape.value(ln).data(), &[0.0, 0.0, 0.0]);

    // constant rows map to the affine bias
    let bias2 = tape.constant(Tensor::row(vec![0.5, -1.0, 2.0])).unwrap();
    let ln2 = tape.layer_norm(c, gain, bias2).unwrap();
    assert_eq!(tape.value(ln2).data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::eval();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = tape.constant(Tensor::zeros(&[4])).unwrap();
    assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::row(vec![-1.0])).unwrap();
    assert_eq!(tape.log(x), Err(TensorError::NonFinite { op: "log" }));
    let big = tape.constant(Tensor::row(vec![1000.0])).unwrap();
    assert_eq!(tape.exp(big), Err(TensorError::NonFinite { op: "exp" }));
}

#[test]
fn backward_examples() {
    let s = store_with(&[("x", Tensor::scalar(3.0))]);
    let mut tape = Tape::eval();
    let x = tape.param(&s, s.id_of("x").unwrap()).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y, &s).unwrap();
    assert_eq!(g.get(s.id_of("x").unwrap()).data(), &[6.0]);

    let s = store_with(&[("x", Tensor::row(vec![-1.0, 2.0])), ("unused", Tensor::row(vec![5.0]))]);
    let mut tape = Tape::eval();
    let x = tape.param(&s, s.id_of("x").unwrap()).unwrap();
    let r = tape.relu(x).unwrap();
    let total = tape.sum(r).unwrap();
    let g = tape.backward(total, &s).unwrap();
    assert_eq!(g.get(s.id_of("x").unwrap()).data(), &[0.0, 1.0]);
    assert_eq!(g.get(s.id_of("unused").unwrap()).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let s = store_with(&[("x", Tensor::row(vec![1.0, 2.0]))]);
    let mut tape = Tape::eval();
    let x = tape.param(&s, s.id_of("x").unwrap()).unwrap();
    assert!(matches!(tape.backward(x, &s), Err(TensorError::NotScalar { .. })));
}

#[test]
fn dropout_is_identity_in_eval_and_rejected_by_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = tape.dropout(x, 0.5, &mut rng).unwrap();
    assert_eq!(x, y);

    let s = store_with(&[("x", Tensor::row(vec![1.0, 2.0, 3.0]))]);
    let result = finite_difference_check(
        |tape, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = tape.param(store, store.id_of("x").unwrap())?;
            let d = tape.dropout(x, 0.5, &mut rng)?;
            tape.sum(d)
        },
        &s,
        DEFAULT_FD_EPS,
    );
    assert_eq!(result, Err(TensorError::Stochastic));
}

#[test]
fn gradcheck_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = store_with(&[("x", random(1, 5, &mut rng)), ("a", random(5, 5, &mut rng))]);
    let err = finite_difference_check(
        |tape, st| {
            let x = tape.param(st, st.id_of("x").unwrap())?;
            let a = tape.param(st, st.id_of("a").unwrap())?;
            let xt = tape.transpose(x)?;
            let ax = tape.matmul(a, xt)?;
            let q = tape.matmul(x, ax)?;
            tape.sum(q)
        },
        &s,
        DEFAULT_FD_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "quadratic form error {err}");
}

#[test]
fn gradcheck_sigmoid_of_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = store_with(&[("x", random(3, 4, &mut rng)), ("w", random(4, 2, &mut rng))]);
    let err = finite_difference_check(
        |tape, st| {
            let x = tape.param(st, st.id_of("x").unwrap())?;
            let w = tape.param(st, st.id_of("w").unwrap())?;
            let m = tape.matmul(x, w)?;
            let y = tape.sigmoid(m)?;
            tape.sum(y)
        },
        &s,
        DEFAULT_FD_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "sigmoid∘matmul error {err}");
}

#[test]
fn gradcheck_every_primitive() {
    for (name, err) in primitive_suite(2024).unwrap() {
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
}

#[test]
fn block_matmul_matches_per_block_products() {
    let mut tape = Tape::eval();
    let a = tape
        .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let b = tape
        .constant(Tensor::matrix(4, 1, vec![5.0, 6.0, 7.0, 8.0]).unwrap())
        .unwrap();
    // Two blocks: [1 2]·[5 6]ᵀ and [3 4]·[7 8]ᵀ.
    let out = tape.block_matmul(a, b, 2).unwrap();
    assert_eq!(tape.value(out).data(), &[17.0, 53.0]);
}

#[test]
fn gru_gate_with_zero_mask_keeps_state() {
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::full(&[1, 6], 0.3)).unwrap();
    let hp = tape.constant(Tensor::full(&[1, 6], -0.2)).unwrap();
    let h = tape.constant(Tensor::row(vec![0.5, -1.0])).unwrap();
    let kept = tape.gru_gate(x, hp, h, &[0.0]).unwrap();
    assert_eq!(tape.value(kept).data(), &[0.5, -1.0]);
    // Zero inputs and state: candidate tanh(0) = 0 and the state stays 0.
    let zx = tape.constant(Tensor::zeros(&[1, 6])).unwrap();
    let zh = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
    let moved = tape.gru_gate(zx, zx, zh, &[1.0]).unwrap();
    assert_eq!(tape.value(moved).data(), &[0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = store_with(&[("x", random(4, 6, &mut rng)), ("w", random(6, 3, &mut rng))]);
    let run = || {
        let mut tape = Tape::training();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.param(&s, s.id_of("x").unwrap()).unwrap();
        let w = tape.param(&s, s.id_of("w").unwrap()).unwrap();
        let d = tape.dropout(x, 0.3, &mut drop_rng).unwrap();
        let m = tape.matmul(d, w).unwrap();
        let sm = tape.softmax_rows(m).unwrap();
        let l = tape.log(sm).unwrap();
        let out = tape.sum(l).unwrap();
        tape.backward(out, &s).unwrap()
    };
    let (a, b) = (run(), run());
    for (ga, gb) in a.iter().zip(b.iter()) {
        let bits_a: Vec<u64> = ga.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = gb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn row_normalize_keeps_zero_rows() {
    let mut tape = Tape::eval();
    let x = tape
        .constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 3.0]).unwrap())
        .unwrap();
    let y = tape.row_normalize(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.25, 0.75]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..24), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let data = values[..rows * cols].to_vec();
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row_slice(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_interval(v in -30.0f64..30.0) {
        let s = sigmoid(v);
        prop_assert!(s > 0.0 && s < 1.0);
    }
}
