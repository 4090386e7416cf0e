use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn v(data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec())
}

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let eye = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let x = m(2, 1, &[3.0, 4.0]);
    let y = eye.matmul(&x).unwrap();
    assert_eq!(y.shape(), &[2, 1]);
    assert_eq!(y.data(), &[3.0, 4.0]);

    let xv = v(&[3.0, 4.0]);
    let yv = eye.matmul(&xv).unwrap();
    assert_eq!(yv.shape(), &[2]);
    assert_eq!(yv.data(), &[3.0, 4.0]);
}

#[test]
fn softmax_symmetry_and_hand_value() {
    let s = v(&[0.0, 0.0, 0.0]).softmax().unwrap();
    for &w in s.data() {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }

    // e^2 / (e^2 + e^1) and its complement.
    let s = v(&[2.0, 1.0]).softmax().unwrap();
    assert!((s.data()[0] - 0.7311).abs() < 1e-4);
    assert!((s.data()[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn shape_mismatch_errors_name_the_op() {
    let err = v(&[1.0, 2.0]).add(&v(&[1.0])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add"), "{msg}");
    assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");

    let err = m(2, 3, &[0.0; 6]).matmul(&m(2, 3, &[0.0; 6])).unwrap_err();
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn apply_dispatches_like_methods() {
    let a = v(&[1.0, -2.0, 3.0]);
    let b = v(&[0.5, 0.5, 0.5]);
    let via_apply = Tensor::apply(&OpKind::ElementwiseMultiply, &[&a, &b]).unwrap();
    let via_method = a.mul(&b).unwrap();
    assert_eq!(via_apply.data(), via_method.data());

    let gathered = Tensor::apply(&OpKind::GatherRows(vec![2, 0]), &[&a]).unwrap();
    assert_eq!(gathered.data(), &[3.0, 1.0]);
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new();
    let x = g.var(&v(&[1.0, 2.0, 3.0]));
    let loss = x.sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum_is_two_x() {
    let g = Graph::new();
    let x = g.var(&v(&[1.0, 2.0, 3.0]));
    let loss = x.mul(&x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_softmax_sum_is_zero() {
    // softmax sums to one identically, so the gradient vanishes.
    let g = Graph::new();
    let z = g.var(&v(&[0.3, -1.2, 2.0]));
    let loss = z.softmax().unwrap().sum().unwrap();
    loss.backward().unwrap();
    for &d in z.grad().unwrap().data() {
        assert!(d.abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_and_untracked_loss() {
    let g = Graph::new();
    let x = g.var(&v(&[1.0, 2.0]));
    assert!(matches!(
        x.backward(),
        Err(TensorError::NonScalarLoss { .. })
    ));

    let plain = v(&[1.0]);
    assert!(matches!(plain.backward(), Err(TensorError::UntrackedLoss)));
}

#[test]
fn backward_twice_errors_until_reset() {
    let g = Graph::new();
    let x = g.var(&v(&[1.0, 2.0]));
    let loss = x.sum().unwrap();
    loss.backward().unwrap();
    assert!(matches!(
        loss.backward(),
        Err(TensorError::BackwardAlreadyRun)
    ));
    g.zero_grads();
    assert!(x.grad().is_none());
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn mixing_graphs_is_an_error() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.var(&v(&[1.0]));
    let b = g2.var(&v(&[1.0]));
    assert!(matches!(a.add(&b), Err(TensorError::GraphMismatch)));
}

#[test]
fn untracked_ops_do_not_record() {
    let a = v(&[1.0, 2.0]);
    let b = v(&[3.0, 4.0]);
    let c = a.add(&b).unwrap();
    assert!(!c.is_tracked());
}

#[test]
fn apply_is_deterministic_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lhs = m(4, 6, &a);
    let rhs = m(6, 4, &b[..24]);
    let r1 = lhs.matmul(&rhs).unwrap();
    let r2 = lhs.matmul(&rhs).unwrap();
    assert_eq!(
        r1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        r2.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let s1 = lhs.softmax().unwrap();
    let s2 = lhs.softmax().unwrap();
    assert_eq!(s1.data(), s2.data());
}

#[test]
fn finite_difference_matches_hand_gradients() {
    // f = sum(x^2) at [1, 2] has gradient [2, 4].
    let f = |x: &Tensor<f64>| x.mul(x).unwrap().sum().unwrap().item().unwrap();
    let g = finite_difference_grad(f, &v(&[1.0, 2.0]), DEFAULT_FD_STEP);
    assert!((g.data()[0] - 2.0).abs() < 1e-6);
    assert!((g.data()[1] - 4.0).abs() < 1e-6);

    // f = sum(softmax(x)) is constant 1.
    let f = |x: &Tensor<f64>| x.softmax().unwrap().sum().unwrap().item().unwrap();
    let g = finite_difference_grad(f, &v(&[0.4, -1.0, 0.2]), DEFAULT_FD_STEP);
    for &d in g.data() {
        assert!(d.abs() < 1e-8);
    }
}

/// Weighted-sum loss so that every output entry gets a distinct pull.
fn weighted_loss(out: &Tensor<f64>, weights: &[f64]) -> Tensor<f64> {
    let w = Tensor::new(out.shape().to_vec(), weights.to_vec()).unwrap();
    out.mul(&w).unwrap().sum().unwrap()
}

/// Check that backward matches finite differences for a unary op, for the
/// gradient w.r.t. `x` drawn from `range`.
fn check_unary(
    op: impl Fn(&Tensor<f64>) -> Tensor<f64> + Copy,
    numel: usize,
    range: (f64, f64),
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..8 {
        let x: Vec<f64> = (0..numel).map(|_| rng.gen_range(range.0..range.1)).collect();
        let w: Vec<f64> = {
            let probe = op(&v(&x));
            (0..probe.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let g = Graph::new();
        let xt = g.var(&v(&x));
        let loss = weighted_loss(&op(&xt), &w);
        loss.backward().unwrap();
        let analytic = xt.grad().unwrap();

        let fd = finite_difference_grad(
            |t| weighted_loss(&op(t), &w).item().unwrap(),
            &v(&x),
            DEFAULT_FD_STEP,
        );
        assert!(
            within_tolerance(analytic.data(), fd.data(), 1e-6, 1e-4),
            "analytic {:?} vs fd {:?}",
            analytic.data(),
            fd.data()
        );
    }
}

#[test]
fn gradcheck_unary_ops() {
    check_unary(|x| x.exp().unwrap(), 5, (-2.0, 2.0), 1);
    check_unary(|x| x.log().unwrap(), 5, (0.3, 2.0), 2);
    check_unary(|x| x.relu().unwrap(), 5, (-2.0, 2.0), 3);
    check_unary(|x| x.softmax().unwrap(), 5, (-2.0, 2.0), 4);
    check_unary(|x| x.sum().unwrap(), 5, (-2.0, 2.0), 5);
    check_unary(|x| x.mean().unwrap(), 5, (-2.0, 2.0), 6);
    check_unary(|x| x.gather_rows(&[3, 0, 3]).unwrap(), 5, (-2.0, 2.0), 7);
}

#[test]
fn gradcheck_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..6 {
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        for (name, op) in [
            ("add", (|x: &Tensor<f64>, y: &Tensor<f64>| x.add(y).unwrap())
                as fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>),
            ("sub", |x, y| x.sub(y).unwrap()),
            ("mul", |x, y| x.mul(y).unwrap()),
        ] {
            // Gradient w.r.t. the first argument.
            let g = Graph::new();
            let at = g.var(&v(&a));
            let loss = weighted_loss(&op(&at, &v(&b)), &w);
            loss.backward().unwrap();
            let analytic = at.grad().unwrap();
            let fd = finite_difference_grad(
                |t| weighted_loss(&op(t, &v(&b)), &w).item().unwrap(),
                &v(&a),
                DEFAULT_FD_STEP,
            );
            assert!(
                within_tolerance(analytic.data(), fd.data(), 1e-6, 1e-4),
                "{name} lhs"
            );

            // And w.r.t. the second.
            let g = Graph::new();
            let bt = g.var(&v(&b));
            let loss = weighted_loss(&op(&v(&a), &bt), &w);
            loss.backward().unwrap();
            let analytic = bt.grad().unwrap();
            let fd = finite_difference_grad(
                |t| weighted_loss(&op(&v(&a), t), &w).item().unwrap(),
                &v(&b),
                DEFAULT_FD_STEP,
            );
            assert!(
                within_tolerance(analytic.data(), fd.data(), 1e-6, 1e-4),
                "{name} rhs"
            );
        }
    }
}

#[test]
fn gradcheck_matmul_scale_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..6 {
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // d(loss)/dA for y = A x.
        let g = Graph::new();
        let at = g.var(&m(3, 4, &a));
        let loss = weighted_loss(&at.matmul(&v(&x)).unwrap(), &w);
        loss.backward().unwrap();
        let analytic = at.grad().unwrap();
        let fd = finite_difference_grad(
            |t| weighted_loss(&t.matmul(&v(&x)).unwrap(), &w).item().unwrap(),
            &m(3, 4, &a),
            DEFAULT_FD_STEP,
        );
        assert!(within_tolerance(analytic.data(), fd.data(), 1e-6, 1e-4));

        // d(loss)/dx for the same product.
        let g = Graph::new();
        let xt = g.var(&v(&x));
        let loss = weighted_loss(&m(3, 4, &a).matmul(&xt).unwrap(), &w);
        loss.backward().unwrap();
        let analytic = xt.grad().unwrap();
        let fd = finite_difference_grad(
            |t| weighted_loss(&m(3, 4, &a).matmul(t).unwrap(), &w).item().unwrap(),
            &v(&x),
            DEFAULT_FD_STEP,
        );
        assert!(within_tolerance(analytic.data(), fd.data(), 1e-6, 1e-4));

        // scalar-scale: gradient w.r.t. both tensor and scale.
        let s0 = rng.gen_range(-2.0..2.0);
        let wx: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let xt = g.var(&v(&x));
        let st = g.var(&Tensor::scalar(s0));
        let loss = weighted_loss(&xt.scale(&st).unwrap(), &wx);
        loss.backward().unwrap();
        let fd_x = finite_difference_grad(
            |t| {
                weighted_loss(&t.scale(&Tensor::scalar(s0)).unwrap(), &wx)
                    .item()
                    .unwrap()
            },
            &v(&x),
            DEFAULT_FD_STEP,
        );
        let fd_s = finite_difference_grad(
            |t| weighted_loss(&v(&x).scale(t).unwrap(), &wx).item().unwrap(),
            &Tensor::scalar(s0),
            DEFAULT_FD_STEP,
        );
        assert!(within_tolerance(xt.grad().unwrap().data(), fd_x.data(), 1e-6, 1e-4));
        assert!(within_tolerance(st.grad().unwrap().data(), fd_s.data(), 1e-6, 1e-4));

        // concat splits the upstream gradient.
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wc: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let at = g.var(&v(&x));
        let bt = g.var(&v(&b));
        let loss = weighted_loss(&Tensor::concat(&[&at, &bt]).unwrap(), &wc);
        loss.backward().unwrap();
        assert_eq!(at.grad().unwrap().data(), &wc[..4]);
        assert_eq!(bt.grad().unwrap().data(), &wc[4..]);
    }
}

#[test]
fn gradcheck_2d_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let g = Graph::new();
    let at = g.var(&m(2, 3, &a));
    let bt = g.var(&m(3, 4, &b));
    let loss = weighted_loss(&at.matmul(&bt).unwrap(), &w);
    loss.backward().unwrap();

    let fd_a = finite_difference_grad(
        |t| weighted_loss(&t.matmul(&m(3, 4, &b)).unwrap(), &w).item().unwrap(),
        &m(2, 3, &a),
        DEFAULT_FD_STEP,
    );
    assert!(within_tolerance(at.grad().unwrap().data(), fd_a.data(), 1e-6, 1e-4));

    let fd_b = finite_difference_grad(
        |t| weighted_loss(&m(2, 3, &a).matmul(t).unwrap(), &w).item().unwrap(),
        &m(3, 4, &b),
        DEFAULT_FD_STEP,
    );
    assert!(within_tolerance(bt.grad().unwrap().data(), fd_b.data(), 1e-6, 1e-4));
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalized(
        data in proptest::collection::vec(-30.0f64..30.0, 1..24)
    ) {
        let t = v(&data).softmax().unwrap();
        let sum: f64 = t.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(t.data().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn softmax_2d_normalizes_each_row(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = Tensor::matrix(rows, cols, data).unwrap().softmax().unwrap();
        for r in 0..rows {
            let sum: f64 = t.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
