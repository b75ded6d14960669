mod common;

use common::*;
use proptest::prelude::*;
use xvit::tensor::ops::{affine, add_row_bias, conv_out_extent, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use xvit::tensor::{
    conv2d, depthwise_conv3x3, gelu, is_deterministic, l2_normalize_axis, matmul, set_deterministic, softmax_rows,
    transpose2d, Gamma,
};
use xvit::{Error, Tensor};

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(matches!(Tensor::<f64>::from_vec([2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    assert!(matches!(Tensor::<f64>::from_vec([2, 0], vec![]), Err(Error::Shape(_))));
    assert!(Tensor::<f64>::try_zeros(Vec::<usize>::new()).is_err());
}

#[test]
fn clones_do_not_alias() {
    let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
    let mut b = a.clone();
    b.data_mut()[0] = 9.0;
    assert_eq!(a.data(), &[1.0, 2.0]);
}

#[test]
fn matmul_identity_left() {
    let a = Tensor::<f64>::from_rows(&[&[0.3, -1.5], &[2.0, 7.25]]);
    assert_eq!(matmul(&Tensor::<f64>::eye(2), &a).unwrap(), a);
}

#[test]
fn matmul_hand_example() {
    let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = Tensor::<f64>::from_rows(&[&[0.0], &[1.0]]);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[2.0, 4.0]);
}

#[test]
fn matmul_association_orders_agree() {
    let a = rand_tensor(&[8, 4], 1);
    let b = rand_tensor(&[4, 4], 2);
    let c = rand_tensor(&[4, 16], 3);
    let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
    let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
    assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([4, 5])).unwrap_err();
    match err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn matmul_matches_naive_oracle() {
    for (seed, (m, k, p)) in [(1, 7, 5), (33, 17, 9), (64, 64, 64), (1, 1, 1), (130, 3, 70)].into_iter().enumerate() {
        let a = rand_tensor(&[m, k], seed as u64);
        let b = rand_tensor(&[k, p], 100 + seed as u64);
        let c = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, p);
        assert!(max_abs(c.data(), &want) <= 1e-12, "{m}x{k}x{p}");
    }
}

#[test]
fn parallel_gemm_is_bit_identical_to_deterministic() {
    // Large enough to take the row-split parallel path.
    let a = rand_tensor(&[160, 128], 5);
    let b = rand_tensor(&[128, 96], 6);
    let was = is_deterministic();
    set_deterministic(true);
    let det = matmul(&a, &b).unwrap();
    set_deterministic(false);
    let par = matmul(&a, &b).unwrap();
    set_deterministic(was);
    assert_eq!(det.data(), par.data());
}

#[test]
fn f32_matmul_matches_f64() {
    let a = rand_tensor(&[9, 6], 7);
    let b = rand_tensor(&[6, 4], 8);
    let c64 = matmul(&a, &b).unwrap();
    let c32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap().cast::<f64>();
    assert!(c64.max_abs_diff(&c32).unwrap() < 1e-5);
}

#[test]
fn transpose_examples() {
    let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]);
    let t = transpose2d(&a).unwrap();
    assert_eq!(t.shape(), &[3, 1]);
    assert_eq!(t.data(), &[1.0, 2.0, 3.0]);

    let r = rand_tensor(&[5, 7], 9);
    let rt = transpose2d(&r).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            assert_eq!(rt.at(&[j, i]), r.at(&[i, j]));
        }
    }
    assert_eq!(transpose2d(&rt).unwrap(), r);
    assert!(matches!(transpose2d(&Tensor::<f64>::zeros([2, 2, 2])), Err(Error::Rank { .. })));
}

#[test]
fn softmax_examples() {
    let u = softmax_rows(&Tensor::<f64>::from_rows(&[&[0.0; 4]])).unwrap();
    assert_eq!(u.data(), &[0.25; 4]);

    for c in [-30.0, 0.0, 1.7, 500.0] {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[c, c + 2f64.ln()]])).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    let r = softmax_rows(&rand_tensor(&[4, 6], 10)).unwrap();
    for row in r.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn softmax_rejects_nan() {
    let x = Tensor::<f64>::from_rows(&[&[0.0, f64::NAN]]);
    assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
}

#[test]
fn l2_normalize_examples() {
    let eps = 1e-300;
    let v = Tensor::<f64>::from_rows(&[&[3.0, 4.0]]);
    let n = l2_normalize_axis(&v, 1, Gamma::Scalar(1.0), eps).unwrap();
    assert!(max_abs(n.data(), &[0.6, 0.8]) < 1e-15);

    let z = Tensor::<f64>::zeros([1, 5]);
    let nz = l2_normalize_axis(&z, 1, Gamma::Scalar(1.0), 1e-6).unwrap();
    assert_eq!(nz.data(), &[0.0; 5]);

    let r = rand_tensor(&[1, 9], 11);
    let base = l2_normalize_axis(&r, 1, Gamma::Scalar(1.0), 1e-12).unwrap();
    for c in [0.5, 3.0, 100.0] {
        let scaled = l2_normalize_axis(&r.scale(c), 1, Gamma::Scalar(1.0), 1e-12).unwrap();
        assert!(scaled.max_abs_diff(&base).unwrap() <= 1e-10);
    }
}

#[test]
fn l2_normalize_along_leading_axis() {
    let a = rand_tensor(&[4, 3, 2], 12);
    let out = l2_normalize_axis(&a, 0, Gamma::Scalar(2.0), 1e-6).unwrap();
    for j in 0..3 {
        for k in 0..2 {
            let v: Vec<f64> = (0..4).map(|i| a.at(&[i, j, k])).collect();
            let want = naive_l2(&v, 2.0, 1e-6);
            for i in 0..4 {
                assert!((out.at(&[i, j, k]) - want[i]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn l2_normalize_per_slice_gamma() {
    let a = rand_tensor(&[3, 4], 13);
    let g = [0.5, 1.0, 2.0];
    let out = l2_normalize_axis(&a, 1, Gamma::PerSlice(&g), 1e-6).unwrap();
    for (r, &gr) in g.iter().enumerate() {
        let want = naive_l2(&a.data()[r * 4..r * 4 + 4], gr, 1e-6);
        assert!(max_abs(&out.data()[r * 4..r * 4 + 4], &want) < 1e-15);
    }
    assert!(l2_normalize_axis(&a, 1, Gamma::PerSlice(&g[..2]), 1e-6).is_err());
}

#[test]
fn l2_normalize_axis_out_of_range() {
    let a = Tensor::<f64>::zeros([2, 2]);
    assert!(matches!(
        l2_normalize_axis(&a, 2, Gamma::Scalar(1.0), 1e-6),
        Err(Error::Axis { axis: 2, rank: 2 })
    ));
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = rand_tensor(&[3, 4, 5], 14);
    let mut w = Tensor::zeros([3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 9 + 4] = 1.0;
    }
    assert_eq!(depthwise_conv3x3(&x, &w, None).unwrap(), x);
}

#[test]
fn depthwise_box_sum_interior() {
    let x = Tensor::<f64>::full([1, 3, 3], 1.0);
    let w = Tensor::<f64>::full([1, 3, 3], 1.0);
    let out = depthwise_conv3x3(&x, &w, None).unwrap();
    assert_eq!(out.at(&[0, 1, 1]), 9.0);
    assert_eq!(out.at(&[0, 0, 0]), 4.0);
    assert_eq!(out.at(&[0, 0, 1]), 6.0);
}

#[test]
fn depthwise_matches_naive_oracle() {
    for (seed, (c, h, w)) in [(2, 5, 5), (4, 1, 7), (3, 6, 1), (1, 1, 1), (5, 4, 9)].into_iter().enumerate() {
        let x = rand_tensor(&[c, h, w], 20 + seed as u64);
        let k = rand_tensor(&[c, 3, 3], 40 + seed as u64);
        let b = rand_tensor(&[c], 60 + seed as u64);
        let out = depthwise_conv3x3(&x, &k, Some(&b)).unwrap();
        let mut want = naive_dwconv3x3(x.data(), k.data(), c, h, w);
        for (i, v) in want.iter_mut().enumerate() {
            *v += b.data()[i / (h * w)];
        }
        assert!(max_abs(out.data(), &want) <= 1e-12, "{c}x{h}x{w}");
    }
}

#[test]
fn depthwise_channel_mismatch() {
    let x = Tensor::<f64>::zeros([2, 3, 3]);
    assert!(depthwise_conv3x3(&x, &Tensor::zeros([3, 3, 3]), None).is_err());
    assert!(depthwise_conv3x3(&x, &Tensor::zeros([2, 3, 3]), Some(&Tensor::zeros([3]))).is_err());
}

#[test]
fn conv_pointwise_equals_matmul() {
    let (cin, cout, h, w) = (3, 4, 5, 6);
    let x = rand_tensor(&[cin, h, w], 15);
    let k = rand_tensor(&[cout, cin, 1, 1], 16);
    let out = conv2d(&x, &k, None, 1, 0).unwrap();
    let flat = x.clone().reshape([cin, h * w]).unwrap();
    let mixed = matmul(&k.clone().reshape([cout, cin]).unwrap(), &flat).unwrap();
    assert!(max_abs(out.data(), mixed.data()) <= 1e-14);
}

#[test]
fn conv_patchify_is_patch_inner_product() {
    let (h, k) = (8, 4);
    let x = rand_tensor(&[2, h, h], 17);
    let w = rand_tensor(&[1, 2, k, k], 18);
    let out = conv2d(&x, &w, None, k, 0).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    for py in 0..2 {
        for px in 0..2 {
            let mut s = 0.0;
            for c in 0..2 {
                for dy in 0..k {
                    for dx in 0..k {
                        s += x.at(&[c, py * k + dy, px * k + dx]) * w.at(&[0, c, dy, dx]);
                    }
                }
            }
            assert!((out.at(&[0, py, px]) - s).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_matches_naive_oracle() {
    let x = rand_tensor(&[3, 8, 8], 19);
    let w = rand_tensor(&[4, 3, 3, 3], 20);
    let b = rand_tensor(&[4], 21);
    let out = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
    let (want, oh, ow) = naive_conv2d(x.data(), w.data(), Some(b.data()), 3, 8, 8, 4, 3, 2, 1);
    assert_eq!(out.shape(), &[4, oh, ow]);
    assert!(max_abs(out.data(), &want) <= 1e-12);
}

#[test]
fn conv_output_extent_uses_floor() {
    // (8 + 2 − 3) / 2 + 1 = 4 with the half pixel dropped.
    assert_eq!(conv_out_extent(8, 3, 2, 1).unwrap(), 4);
    assert_eq!(conv_out_extent(7, 3, 2, 1).unwrap(), 4);
    assert!(conv_out_extent(2, 5, 1, 0).is_err());
    assert!(conv_out_extent(4, 3, 0, 1).is_err());
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu(&Tensor::<f64>::from_rows(&[&[0.0]])).data(), &[0.0]);
    let g10 = gelu(&Tensor::<f64>::from_rows(&[&[10.0]])).data()[0];
    assert!((9.999..=10.0).contains(&g10));
    assert!((GELU_SQRT_2_OVER_PI - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-16);
    assert_eq!(GELU_CUBIC, 0.044715);
}

#[test]
fn gelu_odd_part_is_identity() {
    // x·Φ(x) − (−x)·Φ(−x) = x·(Φ(x) + Φ(−x)) = x.
    let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
    let t = Tensor::<f64>::from_vec([xs.len()], xs.clone()).unwrap();
    let pos = gelu(&t);
    let neg = gelu(&t.scale(-1.0));
    for ((x, p), n) in xs.iter().zip(pos.data()).zip(neg.data()) {
        assert!((p - n - x).abs() < 1e-12, "x = {x}");
        assert!((p - gelu_ref(*x)).abs() < 1e-15);
    }
}

#[test]
fn affine_and_row_bias() {
    let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let s = Tensor::<f64>::from_vec([2], vec![2.0, -1.0]).unwrap();
    let b = Tensor::<f64>::from_vec([2], vec![0.5, 0.0]).unwrap();
    assert_eq!(affine(&x, &s, &b).unwrap().data(), &[2.5, -2.0, 6.5, -4.0]);
    assert_eq!(add_row_bias(&x, &b).unwrap().data(), &[1.5, 2.0, 3.5, 4.0]);
    assert!(affine(&x, &Tensor::zeros([3]), &b).is_err());
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=64, 1usize..=64, 1usize..=64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_matmul_associative((m, k, p) in dims(), q in 1usize..=64, seed in any::<u64>()) {
        let a = rand_tensor(&[m, k], seed);
        let b = rand_tensor(&[k, p], seed ^ 1);
        let c = rand_tensor(&[p, q], seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);
    }

    #[test]
    fn prop_transpose_matches_oracle(m in 1usize..20, k in 1usize..20, seed in any::<u64>()) {
        let a = rand_tensor(&[m, k], seed);
        let t = transpose2d(&a).unwrap();
        prop_assert_eq!(t.data(), &naive_transpose(a.data(), m, k)[..]);
    }

    #[test]
    fn prop_softmax_rows_sum_to_one_and_shift_invariant(
        m in 1usize..8, p in 1usize..12, c in -50.0f64..50.0, seed in any::<u64>()
    ) {
        let a = rand_tensor(&[m, p], seed).scale(5.0);
        let s = softmax_rows(&a).unwrap();
        for (row, src) in s.data().chunks(p).zip(a.data().chunks(p)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(max_abs(row, &naive_softmax_row(src)) <= 1e-15);
        }
        let shifted = softmax_rows(&a.map(|x| x + c)).unwrap();
        prop_assert!(shifted.max_abs_diff(&s).unwrap() <= 1e-12);
    }

    #[test]
    fn prop_l2_normalize_degree_zero_and_bounded(
        n in 1usize..16, gamma in 0.1f64..4.0, c in 0.01f64..100.0, seed in any::<u64>()
    ) {
        let v = rand_tensor(&[1, n], seed);
        prop_assume!(v.data().iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3);
        let eps = 1e-6;
        let a = l2_normalize_axis(&v, 1, Gamma::Scalar(gamma), eps).unwrap();
        let b = l2_normalize_axis(&v.scale(c), 1, Gamma::Scalar(gamma), eps).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-8);
        let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= gamma);
        prop_assert!(gamma - norm <= 1e-6 * gamma);
    }

    #[test]
    fn prop_conv_matches_oracle(
        cin in 1usize..4, cout in 1usize..4, h in 1usize..9, w in 1usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = rand_tensor(&[cin, h, w], seed);
        let wt = rand_tensor(&[cout, cin, k, k], seed ^ 3);
        let out = conv2d(&x, &wt, None, stride, pad).unwrap();
        let (want, oh, ow) = naive_conv2d(x.data(), wt.data(), None, cin, h, w, cout, k, stride, pad);
        prop_assert_eq!(out.shape(), &[cout, oh, ow][..]);
        prop_assert!(max_abs(out.data(), &want) <= 1e-12);
    }

    #[test]
    fn prop_depthwise_channels_never_mix(c in 2usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = rand_tensor(&[c, h, w], seed);
        let k = rand_tensor(&[c, 3, 3], seed ^ 4);
        let base = depthwise_conv3x3(&x, &k, None).unwrap();
        // Perturbing channel 0 changes nothing in the other channels.
        let mut y = x.clone();
        for v in &mut y.data_mut()[..h * w] {
            *v += 1.0;
        }
        let moved = depthwise_conv3x3(&y, &k, None).unwrap();
        prop_assert_eq!(&base.data()[h * w..], &moved.data()[h * w..]);
    }
}
