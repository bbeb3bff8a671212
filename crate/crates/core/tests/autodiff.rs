mod common;

use common::*;
use divis::graph::pair_indices;
use divis::{Error, Graph, PoolKind, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in fd_suite() {
        assert!(err < FD_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn conv_of_zero_input_is_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let k = g.constant(randn(&[1, 1, 2, 2], 0));
    let b = g.constant(Tensor::from_vec(vec![0.75]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));
}

#[test]
fn identity_kernel_copies_input() {
    let mut g = Graph::new();
    let data = randn(&[1, 1, 3, 3], 1);
    let x = g.constant(data.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &data);
}

#[test]
fn conv_matches_nested_loops() {
    let x = randn(&[1, 2, 5, 5], 2);
    let k = randn(&[3, 2, 3, 3], 3);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, None, 1, 0).unwrap();
    let want = reference_conv(&x, &k, None, 1, 0);
    assert_eq!(g.shape(y), want.shape());
    assert!(max_abs_diff(g.value(y).data(), want.data()) < 1e-12);
}

#[test]
fn conv_output_size_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 11, 8]));
    let k = g.constant(Tensor::zeros(&[4, 3, 3, 5]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 4, (11 + 2 - 3) / 2 + 1, (8 + 2 - 5) / 2 + 1]);
}

#[test]
fn conv_shape_errors_are_descriptive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let msg = g.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(msg.contains("conv2d") && msg.contains('3') && msg.contains('2'), "{msg}");
    let big = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::Shape { .. })));
    let k2 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, k2, None, 0, 0).is_err());
}

#[test]
fn relu_and_dot_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let v = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let d = g.dot(v, v).unwrap();
    assert_eq!(g.value(d).item(), 25.0);
}

#[test]
fn relu_subgradient_at_kink_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let x = randn(&[7], 4);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let sq = g.square(v);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap().clone();
    assert!(max_abs_diff(grad.data(), x.scaled(2.0).data()) < 1e-15);
    let err = grad_check(&[x], |g, v| {
        let sq = g.square(v[0]);
        Ok(g.sum(sq))
    });
    assert!(err < FD_TOL);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[4], 5));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::new();
    let w = randn(&[5], 6);
    let wv = g.constant(w.clone());
    let x = g.leaf(randn(&[5], 7));
    let d = g.dot(wv, x).unwrap();
    g.backward(d).unwrap();
    assert_eq!(g.grad(x).unwrap(), &w);
    assert!(g.grad(wv).is_none());
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![3]));
}

#[test]
fn binary_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(a, b).is_err());
    assert!(g.sub(a, b).is_err());
    assert!(g.mul(a, b).is_err());
    assert!(g.dot(a, b).is_err());
}

#[test]
fn max_pool_picks_first_maximum() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap());
    let p = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
    assert_eq!(g.value(p).data(), &[3.0]);
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn unfold_enumerates_row_major_crops() {
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 4, 4], data).unwrap());
    let u = g.unfold(x, 2, 2).unwrap();
    assert_eq!(g.shape(u), &[4, 1, 2, 2]);
    let v = g.value(u).data();
    assert_eq!(&v[0..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&v[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&v[12..16], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn min_gradient_reaches_argmin_pair_only() {
    let rows = Tensor::new(&[3, 1], vec![0.0, 1.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(rows);
    let d = g.pairwise_distances(x).unwrap();
    assert_eq!(g.value(d).data(), &[1.0, 3.0, 2.0]);
    let m = g.min(d).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
}

#[test]
fn min_ties_go_to_lowest_pair_index() {
    let rows = Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(rows);
    let d = g.pairwise_distances(x).unwrap();
    let m = g.min(d).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
}

#[test]
fn distance_gradient_at_coincident_rows_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
    let d = g.pairwise_distances(x).unwrap();
    let s = g.sum(d);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|v| v.is_finite() && *v == 0.0));
}

#[test]
fn pair_enumeration_matches_brute_force() {
    for n in 0..9 {
        let mut brute = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    brute.push((i, j));
                }
            }
        }
        assert_eq!(pair_indices(n), brute);
        assert_eq!(pair_indices(n).len(), n * n.saturating_sub(1) / 2);
    }
}

#[test]
fn constants_are_untracked() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = g.leaf(Tensor::scalar(3.0));
    let cc = g.square(c);
    let y = g.mul(cc, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 4.0);
    assert!(g.grad(c).is_none());
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let x = randn(&[2, 2, 6, 6], 8);
        let mut g = Graph::new();
        let v = g.leaf(x);
        let k = g.constant(randn(&[3, 2, 3, 3], 9));
        let c = g.conv2d(v, k, None, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.pool2d(r, PoolKind::Max, 2, 2).unwrap();
        let s = g.l2norm(p);
        g.backward(s).unwrap();
        (g.value(s).item().to_bits(), g.grad(v).unwrap().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_agrees_with_reference_on_random_shapes(
        b in 1usize..3, c in 1usize..4, k in 1usize..4,
        h in 1usize..9, w in 1usize..9,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, pad in 0usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(kh <= h + 2 * pad && kw <= w + 2 * pad);
        let x = randn(&[b, c, h, w], seed);
        let kern = randn(&[k, c, kh, kw], seed ^ 1);
        let bias = randn(&[k], seed ^ 2);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(kern.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let want = reference_conv(&x, &kern, Some(bias.data()), stride, pad);
        prop_assert_eq!(g.shape(y), want.shape());
        prop_assert!(max_abs_diff(g.value(y).data(), want.data()) < 1e-12);
    }

    #[test]
    fn conv_gradient_matches_finite_differences(
        c in 1usize..3, h in 3usize..7, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let x = randn(&[1, c, h, h], seed);
        let kern = randn(&[2, c, 3, 3], seed ^ 3);
        let err = grad_check(&[x, kern], |g, v| {
            let y = g.conv2d(v[0], v[1], None, stride, pad)?;
            weigh(g, y, 99)
        });
        prop_assert!(err < FD_TOL, "{}", err);
    }

    #[test]
    fn values_stay_finite(seed in any::<u64>()) {
        let x = randn(&[2, 1, 6, 6], seed);
        let mut g = Graph::new();
        let v = g.leaf(x);
        let k = g.constant(randn(&[2, 1, 3, 3], seed ^ 5));
        let c = g.conv2d(v, k, None, 1, 0).unwrap();
        let r = g.square(c);
        let f = g.reshape(r, &[2, 32]).unwrap();
        let d = g.pairwise_distances(f).unwrap();
        let m = g.min(d).unwrap();
        g.backward(m).unwrap();
        prop_assert!(g.value(m).is_finite());
        prop_assert!(g.grad(v).unwrap().is_finite());
    }

    #[test]
    fn grad_shape_matches_value_shape(b in 1usize..4, f in 1usize..6, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.leaf(randn(&[b, f], seed));
        let s = g.sum_items(x).unwrap();
        let sq = g.square(s);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        prop_assert_eq!(g.grad(x).unwrap().shape(), &[b, f]);
    }
}
