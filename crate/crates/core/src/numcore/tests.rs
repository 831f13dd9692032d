use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at2(i, p) * b.at2(p, j);
            }
        }
    }
    t(&[m, n], &out)
}

#[test]
fn matmul_identity_and_hand_values() {
    let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
    let r = t(&[1, 2], &[1.0, 2.0])
        .matmul(&t(&[2, 1], &[3.0, 4.0]))
        .unwrap();
    assert_eq!(r.data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = Tensor::zeros([2, 3])
        .matmul(&Tensor::zeros([2, 3]))
        .unwrap_err();
    match err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn matmul_random_3x4_by_4x2_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::randn([3, 4], 1.0, &mut rng);
    let b = Tensor::randn([4, 2], 1.0, &mut rng);
    assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
}

#[test]
fn softmax_examples() {
    let s = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-9 && s.data()[1].abs() < 1e-9);

    // Oracle: exp(x_i - 3) / sum, summed largest-last in compensated form.
    let s = t(&[3], &[1.0, 2.0, 3.0]).softmax(0).unwrap();
    let e = [libm::exp(-2.0), libm::exp(-1.0), 1.0];
    let z = e[0] + e[1] + e[2];
    for i in 0..3 {
        assert!((s.data()[i] - e[i] / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_bad_axis_and_nan_tensor_is_unconstructible() {
    assert!(Tensor::zeros([2, 2]).softmax(2).is_err());
    assert!(matches!(
        Tensor::new([1], vec![f64::NAN]),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn grad_check_quadratic() {
    let x = t(&[5], &[0.3, -1.2, 2.0, 0.0, 7.5]);
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    let expected = x.map(|v| 2.0 * v);
    assert!(g.wrt(&tape, v).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn grad_of_sum_of_softmax_is_zero() {
    let x = t(&[4], &[0.1, -2.0, 3.0, 0.5]);
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let s = tape.softmax(v, 0).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap().wrt(&tape, v);
    assert!(g.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn grad_check_rejects_non_scalar() {
    let err = grad_check(|tape, v| tape.scale(v, 2.0), &Tensor::zeros([3]), 1e-4).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn backward_visits_in_reverse_and_unused_grads_are_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(t(&[2], &[3.0, 4.0]));
    let b = tape.scale(a, 3.0).unwrap();
    let c = tape.sigmoid(b).unwrap();
    let l = tape.sum(c).unwrap();
    let g = tape.backward(l).unwrap();
    let order = g.visit_order();
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(order, &[l.index(), c.index(), b.index(), a.index()]);
    assert_eq!(g.wrt(&tape, unused).data(), &[0.0, 0.0]);
}

#[test]
fn ln_of_non_positive_is_an_error() {
    let mut tape = Tape::new();
    let v = tape.leaf(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.ln(v), Err(Error::NonFinite("ln"))));
}

#[test]
fn row_normalize_identity_fallback() {
    let mut tape = Tape::new();
    let v = tape.leaf(t(&[2, 2], &[0.0, 0.0, 1.0, 3.0]));
    let y = tape.row_normalize(v).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.25, 0.75]);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn([2, 3, 4, 5], 1.0, &mut rng);
    let w = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn([2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(xv, wv, Some(bv)).unwrap();
    let y = tape.value(y);
    for s in 0..2 {
        for co in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) =
                                    (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if yy < 0 || yy >= 4 || xx < 0 || xx >= 5 {
                                    continue;
                                }
                                acc += w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[((s * 3 + ci) * 4 + yy as usize) * 5 + xx as usize];
                            }
                        }
                    }
                    let got = y.data()[((s * 2 + co) * 4 + i) * 5 + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn layer_norm_matches_formula() {
    let x = t(&[2, 3], &[1.0, 2.0, 4.0, -1.0, 0.0, 1.0]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.layer_norm(v, 1e-5).unwrap();
    for r in 0..2 {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0;
        for j in 0..3 {
            let e = (row[j] - m) / libm::sqrt(var + 1e-5);
            assert!((tape.value(y).at2(r, j) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn permute_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([2, 3, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(p), &[4, 2, 3]);
    assert_eq!(
        tape.value(p).data()[1 * 6 + 1 * 3 + 2],
        x.data()[1 * 12 + 2 * 4 + 1]
    );
    let q = tape.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(q), &x);
}

#[test]
fn adam_and_sgd_decrease_quadratic() {
    for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[3.0, -2.0]));
        for _ in 0..50 {
            let tr = Trainable::all(&store);
            let mut g = Graph::training(&store, &tr);
            let w = g.param(id);
            let sq = g.tape.mul(w, w).unwrap();
            let l = g.tape.sum(sq).unwrap();
            let grads = g.tape.backward(l).unwrap();
            let pg = g.param_grads(&grads);
            opt.step(&mut store, &pg).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.5));
    }
}

/// Every differentiable op checked against finite differences.
#[test]
fn per_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::randn([3, 4], 1.0, &mut rng);
    let b = Tensor::randn([4, 2], 1.0, &mut rng);
    let c = Tensor::randn([3, 4], 1.0, &mut rng);
    let pos = Tensor::uniform([3, 4], 0.5, 2.0, &mut rng);
    let row = Tensor::randn([4], 1.0, &mut rng);
    let col = Tensor::randn([3], 1.0, &mut rng);
    let wsum = Tensor::randn([3, 4], 1.0, &mut rng);
    type Case = (
        &'static str,
        Vec<Tensor>,
        fn(&mut Tape, &[Var]) -> crate::Result<Var>,
    );
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(y)?;
            t.sum(s)
        }),
        (
            "add_sub_mul_div",
            vec![a.clone(), c.clone(), pos.clone(), wsum.clone()],
            |t, v| {
                let x = t.add(v[0], v[1])?;
                let x = t.sub(x, v[3])?;
                let x = t.mul(x, v[1])?;
                let x = t.div(x, v[2])?;
                let x = t.mul(x, v[3])?;
                t.sum(x)
            },
        ),
        (
            "scale_shift_sigmoid_gelu_relu",
            vec![a.clone(), wsum.clone()],
            |t, v| {
                let x = t.scale(v[0], 1.7)?;
                let x = t.add_scalar(x, 0.3)?;
                let s = t.sigmoid(x)?;
                let g = t.gelu(x)?;
                let r = t.relu(x)?;
                let y = t.add(s, g)?;
                let y = t.add(y, r)?;
                let c = t.clamp_min(x, 0.2)?;
                let y = t.add(y, c)?;
                let y = t.mul(y, v[1])?;
                t.mean(y)
            },
        ),
        ("ln", vec![pos.clone(), wsum.clone()], |t, v| {
            let y = t.ln(v[0])?;
            let y = t.mul(y, v[1])?;
            t.sum(y)
        }),
        (
            "softmax_both_axes",
            vec![a.clone(), wsum.clone()],
            |t, v| {
                let s0 = t.softmax(v[0], 0)?;
                let s1 = t.softmax(v[0], 1)?;
                let y = t.add(s0, s1)?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            },
        ),
        ("layer_norm", vec![a.clone(), wsum.clone()], |t, v| {
            let y = t.layer_norm(v[0], 1e-5)?;
            let y = t.mul(y, v[1])?;
            t.sum(y)
        }),
        (
            "l2_normalize_rows",
            vec![a.clone(), wsum.clone()],
            |t, v| {
                let y = t.l2_normalize_rows(v[0])?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            },
        ),
        (
            "row_normalize",
            vec![
                Tensor::uniform([3, 3], 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(2)),
                Tensor::randn([3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5)),
            ],
            |t, v| {
                let y = t.row_normalize(v[0])?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            },
        ),
        (
            "broadcast_vectors",
            vec![a.clone(), row.clone(), col.clone(), wsum.clone()],
            |t, v| {
                let y = t.add_row_vector(v[0], v[1])?;
                let y = t.mul_row_vector(y, v[1])?;
                let y = t.add_col_vector(y, v[2])?;
                let y = t.mul_col_vector(y, v[2])?;
                let y = t.mul(y, v[3])?;
                t.sum(y)
            },
        ),
        (
            "reshape_transpose_permute",
            vec![a.clone(), b.clone()],
            |t, v| {
                let y = t.transpose(v[0])?;
                let y = t.reshape(y, &[2, 2, 3])?;
                let y = t.permute(y, &[2, 1, 0])?;
                let y = t.reshape(y, &[3, 4])?;
                let y = t.matmul(y, v[1])?;
                let y = t.sigmoid(y)?;
                t.sum(y)
            },
        ),
        ("slice_gather_concat", vec![a.clone(), c.clone()], |t, v| {
            let l = t.slice_cols(v[0], 1, 2)?;
            let r = t.slice_rows(v[1], 1, 2)?;
            let r = t.transpose(r)?;
            let g = t.gather_rows(v[0], &[2, 0, 2])?;
            let g = t.slice_cols(g, 0, 2)?;
            let cc = t.concat_rows(&[l, g])?;
            let s = t.sigmoid(cc)?;
            let x = t.concat_cols(&[r, r])?;
            let x = t.sigmoid(x)?;
            let a = t.sum(s)?;
            let b = t.mean(x)?;
            t.add(a, b)
        }),
        ("row_col_sums", vec![a.clone()], |t, v| {
            let r = t.row_sums(v[0])?;
            let c = t.col_sums(v[0])?;
            let r = t.sigmoid(r)?;
            let c = t.gelu(c)?;
            let a = t.sum(r)?;
            let b = t.sum(c)?;
            t.add(a, b)
        }),
        (
            "conv2d",
            vec![
                Tensor::randn([1, 2, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(9)),
                Tensor::randn([2, 2, 3, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(10)),
                Tensor::randn([2], 1.0, &mut ChaCha8Rng::seed_from_u64(12)),
            ],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]))?;
                let y = t.sigmoid(y)?;
                t.sum(y)
            },
        ),
    ];
    for (name, inputs, f) in cases {
        assert!(
            inputs.iter().map(Tensor::len).sum::<usize>() <= 64,
            "{name} too large"
        );
        let err = grad_check_many(f, &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop_up_to_8(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([m, k], 1.0, &mut rng);
        let b = Tensor::randn([k, n], 1.0, &mut rng);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..16),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let x = Tensor::new([n], row.clone()).unwrap();
        let s = x.softmax(0).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-9);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        let shifted = x.map(|v| v + shift).softmax(0).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn([4, 5], 1.0, &mut rng);
            let b = Tensor::randn([5, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (av, bv) = (tape.leaf(a), tape.leaf(b));
            let y = tape.matmul(av, bv).unwrap();
            let y = tape.layer_norm(y, 1e-5).unwrap();
            let y = tape.softmax(y, 1).unwrap();
            let l = tape.sum(y).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(y).clone(), g.wrt(&tape, av))
        };
        prop_assert_eq!(run(), run());
    }
}
