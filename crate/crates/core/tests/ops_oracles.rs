//! Loop-based reference implementations checked against the fast kernels.

mod common;

use anchorconv::ops::norm::batchnorm_forward;
use anchorconv::ops::pool::maxpool2_forward;
use anchorconv::ops::{conv2d_forward, BnState, Mode};
use anchorconv::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::naive_conv;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.random_range(1..=3);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let h = rng.random_range(k.max(1)..=6);
        let w = rng.random_range(k.max(1)..=6);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let x = Tensor::randn(&[n, cin, h, w], 1000 + case, 1.0).unwrap();
        let kern = Tensor::randn(&[cout, cin, k, k], 2000 + case, 1.0).unwrap();
        let fast = conv2d_forward(&x, &kern, stride, pad).unwrap();
        let (slow, oh, ow) = naive_conv(x.data(), kern.data(), (n, cin, h, w), (cout, k, k), stride, pad);
        assert_eq!(fast.shape(), &[n, cout, oh, ow], "case {case}");
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!(rel(*a, *b) < 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn maxpool2_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let h = 2 * rng.random_range(1..=3);
        let w = 2 * rng.random_range(1..=3);
        let x = Tensor::randn(&[n, c, h, w], 500 + case, 1.0).unwrap();
        let (out, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(out.shape(), &[n, c, h / 2, w / 2]);
        let d = x.data();
        for b in 0..n * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(d[(b * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    let got = out.data()[(b * (h / 2) + oy) * (w / 2) + ox];
                    assert!(rel(got, m) < 1e-12, "case {case}");
                }
            }
        }
    }
}

#[test]
fn maxpool_undoes_duplication_upsample() {
    let (n, c, h, w) = (2, 3, 3, 4);
    let small = Tensor::randn(&[n, c, h, w], 9, 1.0).unwrap();
    let mut up = vec![0.0; n * c * 4 * h * w];
    for b in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                up[(b * 2 * h + y) * 2 * w + x] = small.data()[(b * h + y / 2) * w + x / 2];
            }
        }
    }
    let up = Tensor::from_vec(&[n, c, 2 * h, 2 * w], up).unwrap();
    let (pooled, _) = maxpool2_forward(&up).unwrap();
    assert_eq!(pooled, small);
}

#[test]
fn conv2d_is_pure() {
    let x = Tensor::randn(&[2, 3, 6, 6], 1, 1.0).unwrap();
    let k = Tensor::randn(&[4, 3, 3, 3], 2, 1.0).unwrap();
    let a = conv2d_forward(&x, &k, 1, 1).unwrap();
    let b = conv2d_forward(&x, &k, 1, 1).unwrap();
    assert_eq!(a.data(), b.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batchnorm_train_output_is_standardized(
        n in 2usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4,
        seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0,
    ) {
        let mut x = Tensor::randn(&[n, c, h, w], seed, scale).unwrap();
        for v in x.data_mut() {
            *v += shift;
        }
        let mut st = BnState::new(c);
        let f = batchnorm_forward(&x, &vec![1.0; c], &vec![0.0; c], &mut st, Mode::Train).unwrap();
        let plane = h * w;
        let count = (n * plane) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| f.out.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            // Input variance of the channel, to account for eps.
            let xin: Vec<f64> = (0..n)
                .flat_map(|b| x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec())
                .collect();
            let xm = xin.iter().sum::<f64>() / count;
            let xv = xin.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / count;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
            if xv > 1e-2 {
                prop_assert!((var - 1.0).abs() < 1e-3);
            }
        }
        for v in &st.running_var {
            prop_assert!(*v >= 0.0);
        }
    }
}
