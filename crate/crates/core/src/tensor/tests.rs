use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let i = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t64(&[1, 1], &[2.0]));
    let b = tape.constant(t64(&[1, 1], &[3.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut expected = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
            }
            expected[i * 2 + j] = acc;
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let out = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.value(out).data(), &expected[..]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t64(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &got) in tape.value(y).data().iter().enumerate() {
        let want = ((i + 1) as f64).exp() / z;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_first_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = vec![(0.25f64).ln(); 8];
    let lp = tape.constant(t64(&[2, 4], &uniform));
    let loss = tape.cross_entropy(lp, &[1, 3], &[true, true]).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

    let mut one_hot = vec![f64::NEG_INFINITY; 8];
    one_hot[1] = 0.0;
    one_hot[4 + 3] = 0.0;
    let lp = tape.constant(t64(&[2, 4], &one_hot));
    let loss = tape.cross_entropy(lp, &[1, 3], &[true, true]).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn cross_entropy_masked_matches_lookup_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let logits = tape.constant(random(&mut rng, &[3, 5]));
    let lp = tape.log_softmax(logits, 1).unwrap();
    let targets = [4, 0, 2];
    let loss = tape.cross_entropy(lp, &targets, &[true, true, false]).unwrap();
    let v = tape.value(lp).data();
    let oracle = -(v[4] + v[5]) / 2.0;
    assert_eq!(tape.value(loss).item(), oracle);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.constant(Tensor::zeros([3, 5]));
    match tape.cross_entropy(lp, &[0, 5, 1], &[true; 3]) {
        Err(Error::Index { position, id, .. }) => assert_eq!((position, id), (1, 5)),
        other => panic!("expected index error, got {other:?}"),
    }
    // masked steps are not checked
    assert!(tape.cross_entropy(lp, &[0, 9, 1], &[true, false, true]).is_ok());
}

#[test]
fn backward_linear_and_quadratic() {
    let mut tape = Tape::new();
    let w = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let loss = tape.sum(w);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let w = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_contract_and_state_errors() {
    let mut tape = Tape::new();
    let w = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));

    let loss = tape.sum(w);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    tape.reset_grads();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_check_linear_is_exact() {
    let p = t64(&[4], &[0.3, -1.0, 2.0, 5.0]);
    let err = grad_check(|tape, vars| Ok(tape.sum(vars[0])), &[p], 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_catches_corrupted_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random(&mut rng, &[2, 3]);
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.mis_scaled_identity(vars[0]);
        let s = tape.softmax(y, 1)?;
        let l = tape.mul(s, y)?;
        Ok(tape.sum(l))
    };
    let err = grad_check(f, &[p], 1e-5).unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let p = t64(&[1], &[0.0]);
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let big = tape.scale(vars[0], 1.0);
        let inf = tape.constant(t64(&[1], &[f64::INFINITY]));
        let s = tape.add(big, inf)?;
        Ok(tape.sum(s))
    };
    assert!(matches!(grad_check(f, &[p], 1e-5), Err(Error::Numeric(_))));
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = random(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_primitive<Fun>(name: &str, params: Vec<Tensor<f64>>, seed: u64, body: Fun)
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
{
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = body(tape, vars)?;
        weighted_sum(tape, y, seed)
    };
    let err = grad_check(f, &params, 1e-5).unwrap();
    assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let c = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let gain = random(&mut rng, &[4]);

        check_primitive("matmul", vec![a.clone(), b.clone()], seed, |t, v| t.matmul(v[0], v[1]));
        check_primitive("add", vec![a.clone(), c.clone()], seed, |t, v| t.add(v[0], v[1]));
        check_primitive("add_bias", vec![a.clone(), row.clone()], seed, |t, v| {
            t.add_bias(v[0], v[1])
        });
        check_primitive("mul", vec![a.clone(), c.clone()], seed, |t, v| t.mul(v[0], v[1]));
        check_primitive("scale", vec![a.clone()], seed, |t, v| Ok(t.scale(v[0], -1.7)));
        check_primitive("gelu", vec![a.clone()], seed, |t, v| Ok(t.gelu(v[0])));
        check_primitive(
            "layer_norm",
            vec![a.clone(), gain.clone(), row.clone()],
            seed,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        );
        check_primitive("softmax", vec![a.clone()], seed, |t, v| t.softmax(v[0], 1));
        check_primitive("softmax0", vec![a.clone()], seed, |t, v| t.softmax(v[0], 0));
        check_primitive("log_softmax", vec![a.clone()], seed, |t, v| t.log_softmax(v[0], 1));
        check_primitive("embedding", vec![a.clone()], seed, |t, v| t.embedding(v[0], &[3, 0, 3, 1]));
        check_primitive("concat_rows", vec![a.clone(), c.clone()], seed, |t, v| {
            t.concat_rows(&[v[0], v[1]])
        });
        check_primitive("concat_cols", vec![a.clone(), c.clone()], seed, |t, v| {
            t.concat_cols(&[v[0], v[1]])
        });
        check_primitive("transpose", vec![a.clone()], seed, |t, v| t.transpose(v[0]));
        check_primitive("slice_cols", vec![a.clone()], seed, |t, v| t.slice_cols(v[0], 1, 2));
        check_primitive("slice_rows", vec![a.clone()], seed, |t, v| t.slice_rows(v[0], 1, 2));
        check_primitive("select_row", vec![a.clone()], seed, |t, v| t.select_row(v[0], 2));
        check_primitive("cross_entropy", vec![a.clone()], seed, |t, v| {
            let lp = t.log_softmax(v[0], 1)?;
            t.cross_entropy(lp, &[1, 3, 0], &[true, false, true])
        });
    }
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&mut rng, &[4, 6]).with_requires_grad(true);
        let b = random(&mut rng, &[6, 5]).with_requires_grad(true);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a), tape.leaf(b));
        let h = tape.matmul(av, bv).unwrap();
        let lp = tape.log_softmax(h, 1).unwrap();
        let loss = tape.cross_entropy(lp, &[0, 1, 2, 3], &[true; 4]).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(loss).item().to_bits(),
            tape.grad(av).unwrap().to_vec(),
            tape.grad(bv).unwrap().to_vec(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let frozen = tape.constant(t64(&[2], &[3.0, 4.0]));
    let p = tape.mul(w, frozen).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(frozen).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::from_rows(&rows);
        let shifted = Tensor::from_rows(
            &rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let (xv, sv) = (tape.constant(x), tape.constant(shifted));
        let y = tape.softmax(xv, 1).unwrap();
        let ys = tape.softmax(sv, 1).unwrap();
        for r in 0..rows.len() {
            let row = tape.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for (a, b) in row.iter().zip(tape.value(ys).row(r)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_exact_shift_is_bitwise_invariant(
        ints in prop::collection::vec(-64i32..64, 2..8),
        shift in -1000i32..1000,
    ) {
        let base: Vec<f32> = ints.iter().map(|&v| v as f32 / 8.0).collect();
        let moved: Vec<f32> = base.iter().map(|&v| v + shift as f32).collect();
        let n = base.len();
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new([n], base).unwrap());
        let b = tape.constant(Tensor::new([n], moved).unwrap());
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        prop_assert_eq!(tape.value(ya).data(), tape.value(yb).data());
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        logits in prop::collection::vec(-10.0f64..10.0, 12),
        targets in prop::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([3, 4], logits).unwrap());
        let lp = tape.log_softmax(x, 1).unwrap();
        let loss = tape.cross_entropy(lp, &targets, &[true; 3]).unwrap();
        prop_assert!(tape.value(loss).item() >= 0.0);
    }
}
