use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn elementwise_mul_by_hand() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let b = t.leaf(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
    let c = t.mul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 10.0, 18.0]);

    let ones = t.leaf(Tensor::ones([3]));
    let same = t.mul(a, ones).unwrap();
    assert_eq!(t.value(same), t.value(a));
}

#[test]
fn elementwise_rejects_mismatch_and_broadcasts_scalars() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::ones([2, 3]));
    let b = t.leaf(Tensor::ones([3, 2]));
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");

    let s = t.leaf(Tensor::scalar(2.5));
    let c = t.mul(a, s).unwrap();
    assert!(t.value(c).data().iter().all(|&v| v == 2.5));
}

#[test]
fn sum_of_product_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let a = rand_tensor(&mut rng, &[4, 3]);

    let mut t = Tape::new();
    let av = t.param(a.clone());
    let bv = t.leaf(b.clone());
    let p = t.mul(av, bv).unwrap();
    let y = t.sum(p);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(av).unwrap(), &b);

    let err = grad_check(
        |t, x| {
            let bv = t.leaf(b.clone());
            let p = t.mul(x, bv)?;
            Ok(t.sum(p))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_by_hand() {
    let mut t = Tape::new();
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    let (mv, ov) = (t.leaf(m.clone()), t.leaf(ones));
    let p = t.matmul(mv, ov).unwrap();
    assert_eq!(t.value(p).data(), &[3.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let i = t.leaf(Tensor::identity(3));
    let xv = t.leaf(x.clone());
    let p = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(p), &x);

    let bad = t.leaf(Tensor::ones([4, 2]));
    assert!(t.matmul(xv, bad).is_err());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let loss = |t: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let p = t.matmul(a, b)?;
        let wv = t.leaf(w.clone());
        let q = t.mul(p, wv)?;
        Ok(t.sum(q))
    };
    let ea = grad_check(
        |t, x| {
            let bv = t.leaf(b.clone());
            loss(t, x, bv)
        },
        &a,
        1e-5,
    )
    .unwrap();
    let eb = grad_check(
        |t, x| {
            let av = t.leaf(a.clone());
            loss(t, av, x)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(ea < 1e-6 && eb < 1e-6, "{ea} {eb}");
}

#[test]
fn conv2d_identity_and_box_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 5, 6]);
    let w = Tensor::ones([1, 1, 1, 1]);
    let b = Tensor::zeros([1]);
    let y = conv2d_forward(&x, &w, Some(&b), ConvSpec::new(1, 0)).unwrap();
    assert_eq!(y, x);

    let ones = Tensor::ones([1, 3, 3]);
    let k = Tensor::ones([1, 1, 3, 3]);
    let y = conv2d_forward(&ones, &k, None, ConvSpec::new(1, 0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv2d_rejects_fractional_output() {
    let x = Tensor::ones([1, 64, 64]);
    let k = Tensor::ones([1, 1, 3, 3]);
    let err = conv2d_forward(&x, &k, None, ConvSpec::new(2, 1)).unwrap_err();
    assert!(matches!(err, Error::Geometry { .. }));
    assert!(conv2d_forward(&x, &Tensor::ones([1, 1, 4, 4]), None, ConvSpec::new(2, 1)).is_ok());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 8, 8]);
    let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let b = rand_tensor(&mut rng, &[3]);
    let r = rand_tensor(&mut rng, &[3, 4, 4]);
    let spec = ConvSpec::new(2, 1);
    let f = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.conv2d(x, w, Some(b), spec)?;
        let rv = t.leaf(r.clone());
        let p = t.mul(y, rv)?;
        Ok(t.sum(p))
    };
    let ex = grad_check(|t, v| { let (w, b) = (t.leaf(w.clone()), t.leaf(b.clone())); f(t, v, w, b) }, &x, 1e-5).unwrap();
    let ew = grad_check(|t, v| { let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone())); f(t, x, v, b) }, &w, 1e-5).unwrap();
    let eb = grad_check(|t, v| { let (x, w) = (t.leaf(x.clone()), t.leaf(w.clone())); f(t, x, w, v) }, &b, 1e-5).unwrap();
    assert!(ex < 1e-5 && ew < 1e-5 && eb < 1e-5, "{ex} {ew} {eb}");
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (c, o, h, k, s, p) in [(2, 3, 8, 4, 2, 1), (1, 2, 7, 3, 1, 1), (3, 2, 9, 3, 3, 0), (2, 2, 5, 1, 1, 0)] {
        let x = rand_tensor(&mut rng, &[c, h, h]);
        let w = rand_tensor(&mut rng, &[o, c, k, k]);
        let spec = ConvSpec::new(s, p);
        let cx = conv2d_forward(&x, &w, None, spec).unwrap();
        let y = rand_tensor(&mut rng, cx.shape());
        let ty = conv_transpose2d_forward(&y, &w, None, spec).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y), x.dot(&ty));
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_stride_two_copies_value() {
    let x = Tensor::new([1, 1, 1], vec![3.5]).unwrap();
    let w = Tensor::ones([1, 1, 2, 2]);
    let y = conv_transpose2d_forward(&x, &w, None, ConvSpec::new(2, 0)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[3.5; 4]);
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let b = rand_tensor(&mut rng, &[2]);
    let r = rand_tensor(&mut rng, &[2, 2, 8, 8]);
    let spec = ConvSpec::new(2, 1);
    let f = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.conv_transpose2d(x, w, Some(b), spec)?;
        let rv = t.leaf(r.clone());
        let p = t.mul(y, rv)?;
        Ok(t.sum(p))
    };
    let ex = grad_check(|t, v| { let (w, b) = (t.leaf(w.clone()), t.leaf(b.clone())); f(t, v, w, b) }, &x, 1e-5).unwrap();
    let ew = grad_check(|t, v| { let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone())); f(t, x, v, b) }, &w, 1e-5).unwrap();
    let eb = grad_check(|t, v| { let (x, w) = (t.leaf(x.clone()), t.leaf(w.clone())); f(t, x, w, v) }, &b, 1e-5).unwrap();
    assert!(ex < 1e-5 && ew < 1e-5 && eb < 1e-5, "{ex} {ew} {eb}");
}

#[test]
fn activations_at_zero_and_ranges() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::zeros([1]));
    let s = t.sigmoid(z);
    let h = t.tanh(z);
    assert_eq!(t.value(s).item(), 0.5);
    assert_eq!(t.value(h).item(), 0.0);

    let big = t.leaf(Tensor::from_vec(vec![-30.0, -3.0, 0.1, 3.0, 30.0]));
    let s = t.sigmoid(big);
    assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let moderate = t.leaf(Tensor::from_vec(vec![-15.0, -3.0, 0.1, 3.0, 15.0]));
    let h = t.tanh(moderate);
    assert!(t.value(h).data().iter().all(|&v| v > -1.0 && v < 1.0));
}

#[test]
fn sigmoid_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[10]).map(|v| 3.0 * v);
    let err = grad_check(|t, v| { let s = t.sigmoid(v); Ok(t.sum(s)) }, &x, 1e-5).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn backward_analytic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 2]);
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let y = t.sum(xv);
    assert_eq!(t.backward(y).unwrap().get(xv).unwrap(), &Tensor::ones([3, 2]));

    let sq = t.mul(xv, xv).unwrap();
    let y = t.sum(sq);
    assert_eq!(t.backward(y).unwrap().get(xv).unwrap(), &x.map(|v| 2.0 * v));

    assert!(t.backward(sq).is_err(), "non-scalar root must be rejected");
}

#[test]
fn sigmoid_matmul_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    let err = grad_check(
        |t, x| {
            let wv = t.leaf(w.clone());
            let p = t.matmul(x, wv)?;
            let s = t.sigmoid(p);
            Ok(t.sum(s))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradients_of_a_sum_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let f = |t: &mut Tape, x: Var| -> Result<Var> {
        let wv = t.leaf(w.clone());
        let p = t.matmul(x, wv)?;
        let s = t.tanh(p);
        Ok(t.sum(s))
    };
    let g = |t: &mut Tape, x: Var| -> Result<Var> {
        let s = t.sigmoid(x);
        let q = t.mul(s, x)?;
        Ok(t.sum(q))
    };
    let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let y = build(&mut t, xv).unwrap();
        t.backward(y).unwrap().take(xv).unwrap()
    };
    let gf = grad_of(&f);
    let gg = grad_of(&g);
    let gsum = grad_of(&|t, x| {
        let a = f(t, x)?;
        let b = g(t, x)?;
        t.add(a, b)
    });
    let mut expected = gf;
    expected.add_assign(&gg).unwrap();
    assert!(gsum.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn row_norms_and_bce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let err = grad_check(|t, v| { let n = t.row_norms(v)?; Ok(t.sum(n)) }, &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");

    let targets = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let z = rand_tensor(&mut rng, &[5]).map(|v| 4.0 * v);
    let err = grad_check(|t, v| t.bce_with_logits(v, &targets), &z, 1e-5).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn bce_with_logits_matches_probability_form() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::from_vec(vec![-2.0, 0.0, 1.5]));
    let targets = Tensor::from_vec(vec![0.0, 1.0, 1.0]);
    let fused = t.bce_with_logits(z, &targets).unwrap();
    let expected: f64 = [(-2.0f64, 0.0), (0.0, 1.0), (1.5, 1.0)]
        .iter()
        .map(|&(z, y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 3.0;
    assert!((t.value(fused).item() - expected).abs() < 1e-14);
}

#[test]
fn graph_aggregate_sums_neighbours_per_block() {
    let nbrs: NeighborLists = Arc::new(vec![vec![1], vec![0, 2], vec![1]]);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new([6, 1], vec![1.0, 2.0, 4.0, 10.0, 20.0, 40.0]).unwrap());
    let y = t.graph_aggregate(x, nbrs.clone()).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 5.0, 2.0, 20.0, 50.0, 20.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[6, 2]);
    let r = rand_tensor(&mut rng, &[6, 2]);
    let err = grad_check(
        |t, v| {
            let y = t.graph_aggregate(v, nbrs.clone())?;
            let rv = t.leaf(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn injected_fault_is_detected() {
    let x = Tensor::from_vec(vec![0.3, -0.2, 0.7]);
    let opts = GradCheckOptions {
        fault: Some(OpKind::Tanh),
        ..Default::default()
    };
    let rep = grad_check_with(|t, v| { let h = t.tanh(v); Ok(t.sum(h)) }, &x, &opts).unwrap();
    assert!(rep.max_rel_error > 0.1);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 3, 4, 4]);
    let a = conv2d_forward(&x, &w, None, ConvSpec::new(2, 1)).unwrap();
    let b = conv2d_forward(&x, &w, None, ConvSpec::new(2, 1)).unwrap();
    assert_eq!(a.data(), b.data());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_conv_geometries_pass_grad_check(
            seed in 0u64..1000,
            c in 1usize..3, o in 1usize..3, h in 3usize..7,
            k in 1usize..4, s in 1usize..3, p in 0usize..2,
        ) {
            let spec = ConvSpec::new(s, p);
            prop_assume!(k <= h + 2 * p && (h + 2 * p - k) % s == 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[c, h, h]);
            let w = rand_tensor(&mut rng, &[o, c, k, k]);
            let out = conv2d_forward(&x, &w, None, spec).unwrap();
            let r = rand_tensor(&mut rng, out.shape());
            let err = grad_check(|t, v| {
                let wv = t.leaf(w.clone());
                let y = t.conv2d(v, wv, None, spec)?;
                let rv = t.leaf(r.clone());
                let q = t.mul(y, rv)?;
                Ok(t.sum(q))
            }, &x, 1e-5).unwrap();
            prop_assert!(err < 1e-5);

            let y = rand_tensor(&mut rng, out.shape());
            let back = conv_transpose2d_forward(&y, &w, None, spec).unwrap();
            prop_assert!((out.dot(&y) - x.dot(&back)).abs() < 1e-8);
        }

        #[test]
        fn elementwise_ops_pass_grad_check(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[n, 2]);
            let b = rand_tensor(&mut rng, &[n, 2]);
            for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
                let err = grad_check(|t, v| {
                    let bv = t.leaf(b.clone());
                    let y = t.elementwise(kind, v, bv)?;
                    let z = t.tanh(y);
                    Ok(t.sum(z))
                }, &a, 1e-5).unwrap();
                prop_assert!(err < 1e-5);
            }
        }
    }
}

#[test]
fn softmax_rows_forward_and_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new([2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap());
    let p = t.softmax_rows(x).unwrap();
    let v = t.value(p).data().to_vec();
    assert!(v[..3].iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(&v[3..], &[1.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[3, 6]).map(|v| 3.0 * v);
    let w = rand_tensor(&mut rng, &[3, 6]);
    let err = grad_check(
        |t, v| {
            let p = t.softmax_rows(v)?;
            let w = t.leaf(w.clone());
            let y = t.mul(p, w)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}
